#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "caat/collectives.hpp"
#include "caat/model.hpp"
#include "caat/optimizer.hpp"
#include "caat/train.hpp"

namespace caat {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kTensorMagic[5] = {'C', 'A', 'A', 'T', '1'};
inline constexpr std::uint8_t kTensorVersion = 1;

/// Tensor record: magic "CAAT1", u8 version, u32 name length, UTF-8 name,
/// u32 ndim, ndim x u64 extents, little-endian float64 payload.
void write_tensor_file(const std::filesystem::path& path, const std::string& name,
                       const Tensor& tensor);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};
NamedTensor read_tensor_file(const std::filesystem::path& path);

struct Checkpoint {
  TrainConfig config;
  CaatModel model;
  AdamW optimizer;
  std::uint64_t step = 0;
  CommLedger ledger;
};

/// Directory with manifest.txt (key=value) and one .bin file per tensor,
/// including the optimizer moments.
void save_checkpoint(const std::filesystem::path& dir, const TrainConfig& config,
                     const CaatModel& model, const AdamW& optimizer, std::uint64_t step,
                     const CommLedger& ledger);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace caat
