#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

namespace caat {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using TokenStream = std::vector<int>;

/// Byte-level tokens (vocabulary 256) of a file. Rejects unreadable files
/// and, when `seq_len` is non-zero, files shorter than seq_len + 1 bytes.
TokenStream ingest_corpus(const std::filesystem::path& path, std::size_t seq_len = 0);

/// Seeded uniform tokens in [0, vocab).
TokenStream synth_data(std::uint64_t seed, std::size_t vocab, std::size_t length);

struct DataSplit {
  TokenStream train;
  TokenStream val;
};

/// Contiguous split: the last floor(0.05 * N) tokens are validation.
DataSplit split_train_val(const TokenStream& tokens);

/// `sequences` windows of seq_len inputs and their next-token targets.
struct Batch {
  std::vector<int> inputs;
  std::vector<int> targets;
  std::size_t seq_len = 0;
  std::size_t sequences = 0;
};

/// Windows drawn at offsets that depend only on (seed, step), so a run
/// resumed at any step sees the same data as an uninterrupted one.
Batch sample_batch(const TokenStream& tokens, std::size_t sequences, std::size_t seq_len,
                   std::uint64_t seed, std::uint64_t step);

/// Up to `max_windows` evenly spaced, non-overlapping windows of the
/// validation stream, grouped `sequences` per batch.
std::vector<Batch> eval_batches(const TokenStream& tokens, std::size_t sequences,
                                std::size_t seq_len, std::size_t max_windows);

}  // namespace caat
