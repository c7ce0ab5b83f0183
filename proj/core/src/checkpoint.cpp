#include "caat/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace caat {

namespace fs = std::filesystem;

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is, const fs::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw CheckpointError("truncated tensor file " + path.string());
  }
  return v;
}

std::string tensor_file(const std::string& name) { return name + ".bin"; }

std::string config_value(const TrainConfig& config, const std::string& key) {
  for (const auto& [k, v] : config.to_kv()) {
    if (k == key) return v;
  }
  return {};
}

}  // namespace

void write_tensor_file(const fs::path& path, const std::string& name, const Tensor& tensor) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot write " + path.string());
  os.write(kTensorMagic, sizeof(kTensorMagic));
  put<std::uint8_t>(os, kTensorVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(tensor.ndim()));
  for (auto e : tensor.shape()) put<std::uint64_t>(os, e);
  os.write(reinterpret_cast<const char*>(tensor.raw()),
           static_cast<std::streamsize>(tensor.size() * sizeof(double)));
  if (!os) throw CheckpointError("failed writing " + path.string());
}

NamedTensor read_tensor_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot read " + path.string());
  char magic[sizeof(kTensorMagic)];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kTensorMagic, sizeof(magic)) != 0) {
    throw CheckpointError("bad magic in " + path.string());
  }
  const auto version = get<std::uint8_t>(is, path);
  if (version != kTensorVersion) {
    throw CheckpointError("unsupported tensor version " + std::to_string(version) + " in " +
                          path.string());
  }
  const auto name_len = get<std::uint32_t>(is, path);
  std::string name(name_len, '\0');
  if (!is.read(name.data(), name_len)) throw CheckpointError("truncated tensor file " + path.string());
  const auto ndim = get<std::uint32_t>(is, path);
  if (ndim == 0 || ndim > 8) throw CheckpointError("implausible rank in " + path.string());
  Shape shape;
  std::uint64_t numel = 1;
  for (std::uint32_t i = 0; i < ndim; ++i) {
    const auto e = get<std::uint64_t>(is, path);
    if (e == 0 || e > (std::uint64_t{1} << 32)) {
      throw CheckpointError("implausible extent in " + path.string());
    }
    shape.push_back(static_cast<std::size_t>(e));
    numel *= e;
  }
  std::vector<double> data(static_cast<std::size_t>(numel));
  if (!is.read(reinterpret_cast<char*>(data.data()),
               static_cast<std::streamsize>(numel * sizeof(double)))) {
    throw CheckpointError("truncated tensor file " + path.string());
  }
  if (is.peek() != std::char_traits<char>::eof()) {
    throw CheckpointError("trailing bytes in " + path.string());
  }
  return {std::move(name), Tensor(std::move(shape), std::move(data))};
}

void save_checkpoint(const fs::path& dir, const TrainConfig& config, const CaatModel& model,
                     const AdamW& optimizer, std::uint64_t step, const CommLedger& ledger) {
  fs::create_directories(dir);
  std::vector<std::pair<std::string, std::string>> manifest = {
      {"format", "CAAT1"},
      {"version", std::to_string(kTensorVersion)},
      {"step", std::to_string(step)},
      {"rng.data_seed", std::to_string(config.model.seed)},
      {"rng.next_step", std::to_string(step)},
      {"p", config_value(config, "p")},
      {"M", std::to_string(config.model.ranks)},
      {"optimizer.steps", std::to_string(optimizer.steps())},
  };
  for (const auto& [k, v] : config.to_kv()) manifest.emplace_back("config." + k, v);

  std::size_t slot = 0;
  std::size_t count = 0;
  for_each_param(model, [&](const std::string& name, const Tensor& t) {
    write_tensor_file(dir / tensor_file(name), name, t);
    ++count;
    if (slot < optimizer.first_moments().size() && !optimizer.first_moments()[slot].empty()) {
      const std::string m = "opt.m." + name;
      const std::string v = "opt.v." + name;
      write_tensor_file(dir / tensor_file(m), m, optimizer.first_moments()[slot]);
      write_tensor_file(dir / tensor_file(v), v, optimizer.second_moments()[slot]);
      count += 2;
    }
    ++slot;
  });
  manifest.emplace_back("tensors", std::to_string(count));
  for (const auto& [key, e] : ledger.entries()) {
    manifest.emplace_back(std::string("ledger.") + to_string(key.kind) + "." +
                              to_string(key.pass) + "." + std::to_string(key.precision),
                          std::to_string(e.elements_per_rank) + "," + std::to_string(e.calls));
  }

  std::ofstream os(dir / "manifest.txt", std::ios::trunc);
  if (!os) throw CheckpointError("cannot write manifest in " + dir.string());
  write_kv_text(os, manifest);
}

namespace {

CommKind parse_kind(const std::string& s) {
  for (auto k : {CommKind::all_reduce, CommKind::partial_reduce, CommKind::reduce_scatter,
                 CommKind::all_gather, CommKind::norm_sync, CommKind::head_reduce,
                 CommKind::embedding_reduce}) {
    if (s == to_string(k)) return k;
  }
  throw CheckpointError("unknown ledger kind " + s);
}

void restore_ledger(CommLedger& ledger, const std::string& key, const std::string& value) {
  // ledger.<kind>.<pass>.<precision> = elements,calls
  std::stringstream ks(key.substr(7));
  std::string kind, pass, precision;
  std::getline(ks, kind, '.');
  std::getline(ks, pass, '.');
  std::getline(ks, precision, '.');
  const auto comma = value.find(',');
  if (comma == std::string::npos || precision.empty()) {
    throw CheckpointError("malformed ledger entry " + key);
  }
  const std::uint64_t elements = std::stoull(value.substr(0, comma));
  const std::uint64_t calls = std::stoull(value.substr(comma + 1));
  const Pass p = pass == "forward" ? Pass::forward : Pass::backward;
  ledger.restore(CommLedger::Key{parse_kind(kind), p, std::stoi(precision)},
                 CommLedger::Entry{elements, calls});
}

}  // namespace

Checkpoint load_checkpoint(const fs::path& dir) {
  std::ifstream in(dir / "manifest.txt");
  if (!in) throw CheckpointError("no checkpoint manifest in " + dir.string());
  std::map<std::string, std::string> kv;
  try {
    kv = parse_kv_text(in);
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("malformed manifest: ") + e.what());
  }
  if (kv["format"] != "CAAT1") throw CheckpointError("manifest has wrong format tag");

  Checkpoint ck;
  for (const auto& [k, v] : kv) {
    if (k.rfind("config.", 0) == 0) {
      try {
        ck.config.apply_kv(k.substr(7), v);
      } catch (const std::invalid_argument& e) {
        throw CheckpointError(std::string("bad config in manifest: ") + e.what());
      }
    } else if (k.rfind("ledger.", 0) == 0) {
      restore_ledger(ck.ledger, k, v);
    }
  }
  ck.config.validate();
  ck.step = std::stoull(kv.at("step"));

  ck.model = CaatModel::init(ck.config.model);
  ck.optimizer = AdamW(ck.config.optim);
  const std::uint64_t opt_steps = std::stoull(kv.at("optimizer.steps"));
  ck.optimizer.set_steps(opt_steps);

  auto load_into = [&](const std::string& name, Tensor& dst) {
    NamedTensor nt = read_tensor_file(dir / tensor_file(name));
    if (nt.name != name) {
      throw CheckpointError("tensor file for " + name + " holds " + nt.name);
    }
    if (nt.tensor.shape() != dst.shape()) {
      throw CheckpointError("extent mismatch for " + name + ": file " +
                            to_string(nt.tensor.shape()) + ", model " + to_string(dst.shape()));
    }
    dst = std::move(nt.tensor);
  };
  for_each_param(ck.model, [&](const std::string& name, Tensor& t) {
    load_into(name, t);
    if (opt_steps > 0) {
      Tensor m = Tensor::zeros_like(t);
      Tensor v = Tensor::zeros_like(t);
      load_into("opt.m." + name, m);
      load_into("opt.v." + name, v);
      ck.optimizer.first_moments().push_back(std::move(m));
      ck.optimizer.second_moments().push_back(std::move(v));
    }
  });
  return ck;
}

}  // namespace caat
