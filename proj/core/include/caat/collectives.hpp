#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "caat/tensor.hpp"

namespace caat {

/// One tensor per simulated tensor-parallel rank, all of identical shape.
class RankSet {
 public:
  RankSet() = default;
  explicit RankSet(std::vector<Tensor> per_rank);
  /// `ranks` copies of the same tensor.
  static RankSet replicate(const Tensor& t, std::size_t ranks);
  static RankSet zeros(std::size_t ranks, const Shape& shape);

  std::size_t ranks() const noexcept { return tensors_.size(); }
  const Shape& shape() const { return tensors_.at(0).shape(); }
  std::size_t channels() const { return tensors_.at(0).cols(); }
  std::size_t tokens() const { return tensors_.at(0).rows(); }

  Tensor& operator[](std::size_t m) { return tensors_[m]; }
  const Tensor& operator[](std::size_t m) const { return tensors_[m]; }
  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

  bool operator==(const RankSet& other) const { return tensors_ == other.tensors_; }

 private:
  std::vector<Tensor> tensors_;
};

/// Which channels the partial channel-reduce synchronizes.
///
/// Channels [0, shared_count()) are summed across ranks; the remaining
/// channels stay private to each rank and, when `scale_private` is set, are
/// multiplied by sqrt(r).
struct PartialReduceSpec {
  double p = 1.0;
  std::size_t h = 0;
  bool scale_private = false;
  std::size_t r = 1;

  PartialReduceSpec() = default;
  PartialReduceSpec(double p, std::size_t h, bool scale_private = false, std::size_t r = 1);

  std::size_t shared_count() const;
  double private_scale() const;
};

/// floor(h * p), robust to p values such as 0.3 whose product lands a hair
/// below an integer.
std::size_t shared_channel_count(std::size_t h, double p);

enum class CommKind {
  all_reduce,
  partial_reduce,
  reduce_scatter,
  all_gather,
  norm_sync,
  head_reduce,
  embedding_reduce,
};
enum class Pass { forward, backward };

const char* to_string(CommKind kind);
const char* to_string(Pass pass);

/// Ledger precision column: bits per communicated element.
int precision_bits(PrecisionMode mode);

/// Cumulative count of communicated elements per rank. An all-reduce of an
/// n-element tensor counts n (each rank sends and receives n values); its
/// reduce-scatter and all-gather halves count half each.
class CommLedger {
 public:
  struct Key {
    CommKind kind;
    Pass pass;
    int precision;
    auto operator<=>(const Key&) const = default;
  };
  struct Entry {
    std::uint64_t elements_per_rank = 0;
    std::uint64_t calls = 0;
  };

  void record(CommKind kind, Pass pass, PrecisionMode precision, std::uint64_t elements);

  const std::map<Key, Entry>& entries() const noexcept { return entries_; }
  std::uint64_t total() const;
  std::uint64_t total(Pass pass) const;
  std::uint64_t total(CommKind kind) const;
  std::uint64_t total(CommKind kind, Pass pass) const;
  /// Traffic of the activation/gradient collectives at block outputs and
  /// norm inputs (partial_reduce, all_reduce, reduce_scatter, all_gather).
  std::uint64_t tensor_parallel(Pass pass) const;
  std::uint64_t tensor_parallel() const;

  void merge(const CommLedger& other);
  /// Overwrites one counter (checkpoint restore).
  void restore(const Key& key, const Entry& entry) { entries_[key] = entry; }
  void clear() { entries_.clear(); }

  /// CSV with columns kind,pass,precision,elements_per_rank,calls.
  void write_csv(std::ostream& os) const;

 private:
  std::map<Key, Entry> entries_;
};

// ---------------------------------------------------------------------------
// Collectives. A null ledger means the ranks live on one device and the
// reduction is a local summation: results are identical but nothing is
// recorded. Reduction order is ascending rank.

RankSet all_reduce(const RankSet& rs, PrecisionMode precision, CommLedger* ledger,
                   Pass pass = Pass::forward, CommKind kind = CommKind::all_reduce);

RankSet partial_channel_reduce(const RankSet& rs, const PartialReduceSpec& spec,
                               PrecisionMode precision, CommLedger* ledger);

/// Vector-Jacobian product of partial_channel_reduce. The operator is
/// self-adjoint, so this is the same reduction applied to gradients and
/// logged as backward traffic.
RankSet partial_channel_reduce_vjp(const RankSet& upstream, const PartialReduceSpec& spec,
                                   PrecisionMode precision, CommLedger* ledger);

/// Splits the token axis into `ranks` equal chunks; rank m ends with the
/// cross-rank sum of chunk m. `kept_per_rank`, when given, replaces the
/// logged payload (masked sends only transmit surviving entries).
RankSet reduce_scatter(const RankSet& rs, PrecisionMode precision, CommLedger* ledger,
                       Pass pass = Pass::forward,
                       std::optional<std::uint64_t> kept_per_rank = std::nullopt);
RankSet all_gather(const RankSet& rs, CommLedger* ledger, Pass pass = Pass::forward);

enum class MaskKind { topk, random };
const char* to_string(MaskKind kind);

/// Compression baseline: per token keep floor(h * p) entries, zero the rest.
struct MaskSpec {
  MaskKind kind = MaskKind::topk;
  double p = 1.0;
  std::uint64_t seed = 0;
};

/// Boolean keep-mask per rank, same layout as the masked tensors.
struct RankMask {
  std::vector<std::vector<std::uint8_t>> keep;
  std::uint64_t kept_per_rank = 0;
};

struct MaskedRankSet {
  RankSet values;
  RankMask mask;
};

/// Applies the mask. `site` distinguishes the collective call sites within a
/// step so random masks differ between blocks.
MaskedRankSet apply_mask(const RankSet& rs, const MaskSpec& spec, std::uint64_t step,
                         std::uint64_t site = 0);
/// Multiplies by a saved mask (backward reuse).
RankSet apply_saved_mask(const RankSet& rs, const RankMask& mask);

}  // namespace caat
