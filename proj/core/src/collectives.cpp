#include "caat/collectives.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "caat/rng.hpp"

namespace caat {

RankSet::RankSet(std::vector<Tensor> per_rank) : tensors_(std::move(per_rank)) {
  if (tensors_.empty()) throw std::invalid_argument("RankSet needs at least one rank");
  for (const auto& t : tensors_) {
    if (!t.same_shape(tensors_.front())) {
      throw ShapeError("RankSet: per-rank shapes differ: " + to_string(t.shape()) + " vs " +
                       to_string(tensors_.front().shape()));
    }
  }
}

RankSet RankSet::replicate(const Tensor& t, std::size_t ranks) {
  return RankSet(std::vector<Tensor>(ranks, t));
}

RankSet RankSet::zeros(std::size_t ranks, const Shape& shape) {
  return RankSet(std::vector<Tensor>(ranks, Tensor(shape)));
}

std::size_t shared_channel_count(std::size_t h, double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("p must lie in [0, 1]");
  const double exact = static_cast<double>(h) * p;
  const auto count = static_cast<std::size_t>(std::floor(exact + 1e-9));
  return std::min(count, h);
}

PartialReduceSpec::PartialReduceSpec(double p_, std::size_t h_, bool scale_private_, std::size_t r_)
    : p(p_), h(h_), scale_private(scale_private_), r(r_) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("p must lie in [0, 1]");
  if (r == 0) throw std::invalid_argument("r must be at least 1");
}

std::size_t PartialReduceSpec::shared_count() const { return shared_channel_count(h, p); }

double PartialReduceSpec::private_scale() const {
  return scale_private ? std::sqrt(static_cast<double>(r)) : 1.0;
}

const char* to_string(CommKind kind) {
  switch (kind) {
    case CommKind::all_reduce: return "all_reduce";
    case CommKind::partial_reduce: return "partial_reduce";
    case CommKind::reduce_scatter: return "reduce_scatter";
    case CommKind::all_gather: return "all_gather";
    case CommKind::norm_sync: return "norm_sync";
    case CommKind::head_reduce: return "head_reduce";
    case CommKind::embedding_reduce: return "embedding_reduce";
  }
  return "unknown";
}

const char* to_string(Pass pass) { return pass == Pass::forward ? "forward" : "backward"; }

int precision_bits(PrecisionMode mode) { return mode == PrecisionMode::full64 ? 32 : 16; }

void CommLedger::record(CommKind kind, Pass pass, PrecisionMode precision,
                        std::uint64_t elements) {
  auto& e = entries_[Key{kind, pass, precision_bits(precision)}];
  e.elements_per_rank += elements;
  e.calls += 1;
}

std::uint64_t CommLedger::total() const {
  std::uint64_t s = 0;
  for (const auto& [k, e] : entries_) s += e.elements_per_rank;
  return s;
}

std::uint64_t CommLedger::total(Pass pass) const {
  std::uint64_t s = 0;
  for (const auto& [k, e] : entries_) {
    if (k.pass == pass) s += e.elements_per_rank;
  }
  return s;
}

std::uint64_t CommLedger::total(CommKind kind) const {
  std::uint64_t s = 0;
  for (const auto& [k, e] : entries_) {
    if (k.kind == kind) s += e.elements_per_rank;
  }
  return s;
}

std::uint64_t CommLedger::total(CommKind kind, Pass pass) const {
  std::uint64_t s = 0;
  for (const auto& [k, e] : entries_) {
    if (k.kind == kind && k.pass == pass) s += e.elements_per_rank;
  }
  return s;
}

namespace {
bool is_tensor_parallel(CommKind kind) {
  return kind == CommKind::all_reduce || kind == CommKind::partial_reduce ||
         kind == CommKind::reduce_scatter || kind == CommKind::all_gather;
}
}  // namespace

std::uint64_t CommLedger::tensor_parallel(Pass pass) const {
  std::uint64_t s = 0;
  for (const auto& [k, e] : entries_) {
    if (k.pass == pass && is_tensor_parallel(k.kind)) s += e.elements_per_rank;
  }
  return s;
}

std::uint64_t CommLedger::tensor_parallel() const {
  return tensor_parallel(Pass::forward) + tensor_parallel(Pass::backward);
}

void CommLedger::merge(const CommLedger& other) {
  for (const auto& [k, e] : other.entries_) {
    auto& mine = entries_[k];
    mine.elements_per_rank += e.elements_per_rank;
    mine.calls += e.calls;
  }
}

void CommLedger::write_csv(std::ostream& os) const {
  os << "kind,pass,precision,elements_per_rank,calls\n";
  for (const auto& [k, e] : entries_) {
    os << to_string(k.kind) << ',' << to_string(k.pass) << ',' << k.precision << ','
       << e.elements_per_rank << ',' << e.calls << '\n';
  }
}

// ---------------------------------------------------------------------------

namespace {

// Sum of element i across ranks, ascending rank.
inline double rank_sum(const RankSet& rs, std::size_t i, PrecisionMode precision) {
  double acc = precision == PrecisionMode::full64 ? rs[0][i] : round_to_bf16(rs[0][i]);
  for (std::size_t m = 1; m < rs.ranks(); ++m) acc = accumulate(acc, rs[m][i], precision);
  return acc;
}

RankSet channel_reduce(const RankSet& rs, const PartialReduceSpec& spec, PrecisionMode precision,
                       CommLedger* ledger, Pass pass) {
  if (rs.channels() != spec.h) {
    throw ShapeError("partial_channel_reduce: last extent " + std::to_string(rs.channels()) +
                     " does not match h=" + std::to_string(spec.h));
  }
  const std::size_t shared = spec.shared_count();
  const std::size_t h = spec.h;
  const std::size_t tokens = rs.tokens();
  const double scale = spec.private_scale();
  const std::size_t ranks = rs.ranks();

  RankSet out = rs;
  if (ranks > 1 && shared > 0) {
    for (std::size_t t = 0; t < tokens; ++t) {
      for (std::size_t c = 0; c < shared; ++c) {
        const std::size_t i = t * h + c;
        const double s = rank_sum(rs, i, precision);
        for (std::size_t m = 0; m < ranks; ++m) out[m][i] = s;
      }
    }
  }
  if (scale != 1.0) {
    for (std::size_t m = 0; m < ranks; ++m) {
      for (std::size_t t = 0; t < tokens; ++t) {
        double* row = out[m].raw() + t * h;
        for (std::size_t c = shared; c < h; ++c) row[c] *= scale;
      }
    }
  }
  if (ledger != nullptr && ranks > 1 && shared > 0) {
    ledger->record(CommKind::partial_reduce, pass, precision,
                   static_cast<std::uint64_t>(tokens) * shared);
  }
  return out;
}

}  // namespace

RankSet all_reduce(const RankSet& rs, PrecisionMode precision, CommLedger* ledger, Pass pass,
                   CommKind kind) {
  const std::size_t ranks = rs.ranks();
  if (ranks == 1) return rs;
  RankSet out = rs;
  const std::size_t n = rs[0].size();
  for (std::size_t i = 0; i < n; ++i) {
    const double s = rank_sum(rs, i, precision);
    for (std::size_t m = 0; m < ranks; ++m) out[m][i] = s;
  }
  if (ledger != nullptr) ledger->record(kind, pass, precision, static_cast<std::uint64_t>(n));
  return out;
}

RankSet partial_channel_reduce(const RankSet& rs, const PartialReduceSpec& spec,
                               PrecisionMode precision, CommLedger* ledger) {
  return channel_reduce(rs, spec, precision, ledger, Pass::forward);
}

RankSet partial_channel_reduce_vjp(const RankSet& upstream, const PartialReduceSpec& spec,
                                   PrecisionMode precision, CommLedger* ledger) {
  return channel_reduce(upstream, spec, precision, ledger, Pass::backward);
}

RankSet reduce_scatter(const RankSet& rs, PrecisionMode precision, CommLedger* ledger, Pass pass,
                       std::optional<std::uint64_t> kept_per_rank) {
  const std::size_t ranks = rs.ranks();
  const std::size_t tokens = rs.tokens();
  if (tokens % ranks != 0) {
    throw ShapeError("reduce_scatter: " + std::to_string(ranks) + " ranks do not divide " +
                     std::to_string(tokens) + " tokens");
  }
  if (ranks == 1) return rs;
  const std::size_t chunk = tokens / ranks;
  const std::size_t h = rs.channels();
  Shape shape = rs.shape();
  shape.front() = chunk;
  if (rs[0].ndim() != 2) throw ShapeError("reduce_scatter expects rank-2 tensors");
  std::vector<Tensor> parts;
  parts.reserve(ranks);
  for (std::size_t m = 0; m < ranks; ++m) {
    Tensor part(shape);
    const std::size_t base = m * chunk * h;
    for (std::size_t i = 0; i < chunk * h; ++i) part[i] = rank_sum(rs, base + i, precision);
    parts.push_back(std::move(part));
  }
  if (ledger != nullptr) {
    // The two halves of an n-element all-reduce carry ceil(n/2) and floor(n/2).
    const std::uint64_t sent = kept_per_rank.value_or(static_cast<std::uint64_t>(rs[0].size()));
    ledger->record(CommKind::reduce_scatter, pass, precision, sent - sent / 2);
  }
  return RankSet(std::move(parts));
}

RankSet all_gather(const RankSet& rs, CommLedger* ledger, Pass pass) {
  const std::size_t ranks = rs.ranks();
  if (ranks == 1) return rs;
  std::vector<Tensor> chunks(rs.begin(), rs.end());
  Tensor full = concat_rows(chunks);
  if (ledger != nullptr) {
    ledger->record(CommKind::all_gather, pass, PrecisionMode::full64,
                   static_cast<std::uint64_t>(full.size()) / 2);
  }
  return RankSet::replicate(full, ranks);
}

const char* to_string(MaskKind kind) { return kind == MaskKind::topk ? "topk" : "random"; }

MaskedRankSet apply_mask(const RankSet& rs, const MaskSpec& spec, std::uint64_t step,
                         std::uint64_t site) {
  const std::size_t h = rs.channels();
  const std::size_t tokens = rs.tokens();
  const std::size_t keep = shared_channel_count(h, spec.p);
  MaskedRankSet out{rs, RankMask{}};
  out.mask.keep.assign(rs.ranks(), std::vector<std::uint8_t>(rs[0].size(), 0));
  out.mask.kept_per_rank = static_cast<std::uint64_t>(tokens) * keep;

  std::vector<std::size_t> order(h);
  for (std::size_t m = 0; m < rs.ranks(); ++m) {
    auto& keep_bits = out.mask.keep[m];
    for (std::size_t t = 0; t < tokens; ++t) {
      const double* row = rs[m].raw() + t * h;
      std::iota(order.begin(), order.end(), std::size_t{0});
      if (spec.kind == MaskKind::topk) {
        std::stable_sort(order.begin(), order.end(), [row](std::size_t a, std::size_t b) {
          return std::fabs(row[a]) > std::fabs(row[b]);
        });
      } else {
        CounterRng rng(mix_seed({spec.seed, step, site, m, t}));
        for (std::size_t i = 0; i < keep; ++i) {
          const std::size_t j = i + static_cast<std::size_t>(rng.below(h - i));
          std::swap(order[i], order[j]);
        }
      }
      for (std::size_t i = 0; i < keep; ++i) keep_bits[t * h + order[i]] = 1;
    }
    double* values = out.values[m].raw();
    for (std::size_t i = 0; i < keep_bits.size(); ++i) {
      if (keep_bits[i] == 0) values[i] = 0.0;
    }
  }
  return out;
}

RankSet apply_saved_mask(const RankSet& rs, const RankMask& mask) {
  if (mask.keep.size() != rs.ranks()) throw ShapeError("apply_saved_mask: rank count mismatch");
  RankSet out = rs;
  for (std::size_t m = 0; m < rs.ranks(); ++m) {
    if (mask.keep[m].size() != rs[m].size()) throw ShapeError("apply_saved_mask: size mismatch");
    for (std::size_t i = 0; i < rs[m].size(); ++i) {
      if (mask.keep[m][i] == 0) out[m][i] = 0.0;
    }
  }
  return out;
}

}  // namespace caat
