#include "caat/data.hpp"

#include <fstream>
#include <iterator>

#include "caat/rng.hpp"

namespace caat {

TokenStream ingest_corpus(const std::filesystem::path& path, std::size_t seq_len) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read corpus " + path.string());
  const std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
  if (in.bad()) throw DataError("error while reading corpus " + path.string());
  if (seq_len != 0 && bytes.size() < seq_len + 1) {
    throw DataError("corpus " + path.string() + " has " + std::to_string(bytes.size()) +
                    " bytes, need at least " + std::to_string(seq_len + 1));
  }
  TokenStream tokens;
  tokens.reserve(bytes.size());
  for (char c : bytes) tokens.push_back(static_cast<int>(static_cast<unsigned char>(c)));
  return tokens;
}

TokenStream synth_data(std::uint64_t seed, std::size_t vocab, std::size_t length) {
  if (vocab == 0) throw DataError("synthetic vocabulary must be non-empty");
  CounterRng rng(mix_seed({seed, 0x5EED}));
  TokenStream tokens(length);
  for (auto& t : tokens) t = static_cast<int>(rng.below(vocab));
  return tokens;
}

DataSplit split_train_val(const TokenStream& tokens) {
  const std::size_t n = tokens.size();
  const std::size_t val = n / 20;
  DataSplit split;
  split.train.assign(tokens.begin(), tokens.end() - static_cast<std::ptrdiff_t>(val));
  split.val.assign(tokens.end() - static_cast<std::ptrdiff_t>(val), tokens.end());
  return split;
}

Batch sample_batch(const TokenStream& tokens, std::size_t sequences, std::size_t seq_len,
                   std::uint64_t seed, std::uint64_t step) {
  if (tokens.size() < seq_len + 1) {
    throw DataError("training stream of " + std::to_string(tokens.size()) +
                    " tokens is shorter than one window of " + std::to_string(seq_len + 1));
  }
  Batch b;
  b.seq_len = seq_len;
  b.sequences = sequences;
  b.inputs.reserve(sequences * seq_len);
  b.targets.reserve(sequences * seq_len);
  const std::uint64_t span = tokens.size() - seq_len;  // valid offsets [0, span)
  CounterRng rng(mix_seed({seed, 0xDA7A, step}));
  for (std::size_t s = 0; s < sequences; ++s) {
    const auto off = static_cast<std::size_t>(rng.below(span));
    b.inputs.insert(b.inputs.end(), tokens.begin() + off, tokens.begin() + off + seq_len);
    b.targets.insert(b.targets.end(), tokens.begin() + off + 1,
                     tokens.begin() + off + seq_len + 1);
  }
  return b;
}

std::vector<Batch> eval_batches(const TokenStream& tokens, std::size_t sequences,
                                std::size_t seq_len, std::size_t max_windows) {
  if (tokens.size() < seq_len + 1) {
    throw DataError("validation stream of " + std::to_string(tokens.size()) +
                    " tokens is shorter than one window of " + std::to_string(seq_len + 1));
  }
  const std::size_t available = (tokens.size() - 1) / seq_len;
  const std::size_t windows = max_windows == 0 ? available : std::min(available, max_windows);
  std::vector<Batch> batches;
  Batch cur;
  cur.seq_len = seq_len;
  for (std::size_t w = 0; w < windows; ++w) {
    // evenly spaced over the available non-overlapping windows
    const std::size_t slot = w * available / windows;
    const std::size_t off = slot * seq_len;
    cur.inputs.insert(cur.inputs.end(), tokens.begin() + off, tokens.begin() + off + seq_len);
    cur.targets.insert(cur.targets.end(), tokens.begin() + off + 1,
                       tokens.begin() + off + seq_len + 1);
    if (++cur.sequences == sequences) {
      batches.push_back(std::move(cur));
      cur = Batch{};
      cur.seq_len = seq_len;
    }
  }
  if (cur.sequences > 0) batches.push_back(std::move(cur));
  return batches;
}

}  // namespace caat
