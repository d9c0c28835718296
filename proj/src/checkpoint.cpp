#include "paml/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace paml {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'P', 'A', 'M', 'L', 'C', 'K', 'P', 'T'};

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v), 8); }
  void bytes(const std::string& s) { out_.write(s.data(), static_cast<std::streamsize>(s.size())); }

 private:
  void le(std::uint64_t v, int n) {
    char b[8];
    for (int i = 0; i < n; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    out_.write(b, n);
  }
  std::ostream& out_;
};

class Reader {
 public:
  Reader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  double f64() { return std::bit_cast<double>(le(8)); }
  std::string bytes(std::uint64_t n) {
    if (n > (1ULL << 32)) fail("implausible length");
    std::string s(n, '\0');
    in_.read(s.data(), static_cast<std::streamsize>(n));
    if (static_cast<std::uint64_t>(in_.gcount()) != n) fail("truncated");
    return s;
  }
  [[noreturn]] void fail(const std::string& what) const {
    throw DataError("checkpoint " + path_ + ": " + what);
  }

 private:
  std::uint64_t le(int n) {
    unsigned char b[8];
    in_.read(reinterpret_cast<char*>(b), n);
    if (in_.gcount() != n) fail("truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }
  std::istream& in_;
  std::string path_;
};

std::vector<double> values_of(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

const CheckpointData::Record& need(const CheckpointData& data, const std::string& name,
                                   std::size_t count) {
  const auto it = data.tensors.find(name);
  if (it == data.tensors.end()) throw DataError("checkpoint is missing tensor " + name);
  if (it->second.values.size() != count) {
    throw DataError("checkpoint tensor " + name + " has " + std::to_string(it->second.values.size()) +
                    " values, model expects " + std::to_string(count));
  }
  return it->second;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + tmp.string());
    Writer w(out);
    out.write(kMagic, sizeof(kMagic));
    w.u32(CheckpointData::kVersion);
    w.u64(data.metadata.size());
    w.bytes(data.metadata);
    w.u64(data.tensors.size());
    std::uint64_t offset = 0;
    for (const auto& [name, rec] : data.tensors) {
      if (shape_numel(rec.shape) != rec.values.size()) {
        throw DimensionError("checkpoint tensor " + name + " shape does not match its values");
      }
      w.u32(static_cast<std::uint32_t>(name.size()));
      w.bytes(name);
      w.u32(static_cast<std::uint32_t>(rec.shape.size()));
      for (std::size_t d : rec.shape) w.u64(d);
      w.u64(offset);
      offset += rec.values.size();
    }
    w.u64(offset);
    for (const auto& [name, rec] : data.tensors) {
      for (double v : rec.values) w.f64(v);
    }
    if (!out) throw DataError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing checkpoint: " + path.string());
  Reader r(in, path.string());
  char magic[8];
  in.read(magic, 8);
  if (in.gcount() != 8 || std::memcmp(magic, kMagic, 8) != 0) r.fail("bad magic");
  const std::uint32_t version = r.u32();
  if (version != CheckpointData::kVersion) r.fail("unsupported version " + std::to_string(version));
  CheckpointData data;
  data.metadata = r.bytes(r.u64());
  const std::uint64_t count = r.u64();
  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Entry> dir;
  for (std::uint64_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.bytes(r.u32());
    const std::uint32_t rank = r.u32();
    if (rank > 8) r.fail("implausible rank for " + e.name);
    for (std::uint32_t d = 0; d < rank; ++d) e.shape.push_back(r.u64());
    e.offset = r.u64();
    dir.push_back(std::move(e));
  }
  const std::uint64_t total = r.u64();
  std::uint64_t expected = 0;
  for (const auto& e : dir) {
    if (e.offset != expected) r.fail("directory offsets are not contiguous at " + e.name);
    expected += shape_numel(e.shape);
  }
  if (expected != total) r.fail("value block size mismatch");
  for (auto& e : dir) {
    CheckpointData::Record rec{e.shape, std::vector<double>(shape_numel(e.shape))};
    for (double& v : rec.values) v = r.f64();
    data.tensors.emplace(e.name, std::move(rec));
  }
  return data;
}

CheckpointData capture(const Model& model, const AdamW* optimizer, const TrainingState& state) {
  CheckpointData data;
  const auto& entries = model.params().entries();
  for (const auto& e : entries) {
    data.tensors["param/" + e.name] = {e.tensor.shape(), values_of(e.tensor)};
  }
  const auto& bank = model.bank();
  const std::size_t n_p = bank.config().size, c1 = bank.config().dim;
  data.tensors["bank/codebook"] = {{n_p, c1}, bank.codebook_values()};
  data.tensors["bank/cluster_size"] = {{n_p}, bank.cluster_size()};
  data.tensors["bank/running_sum"] = {{n_p, c1}, bank.running_sum()};
  json meta = {{"format", "paml-checkpoint"},
               {"config", model.config().to_map()},
               {"epoch", state.epoch},
               {"best_val", state.best_val},
               {"rng", state.rng_state},
               {"bank_updates", bank.updates()}};
  if (optimizer != nullptr) {
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const Shape& s = entries[i].tensor.shape();
      data.tensors["adam_m/" + entries[i].name] = {s, optimizer->first_moments()[i]};
      data.tensors["adam_v/" + entries[i].name] = {s, optimizer->second_moments()[i]};
    }
    meta["adam"] = {{"steps", optimizer->steps()},
                    {"skipped", optimizer->skipped()},
                    {"param_steps", optimizer->param_steps()}};
  }
  data.metadata = meta.dump();
  return data;
}

RunConfig checkpoint_config(const CheckpointData& data) {
  try {
    const json meta = json::parse(data.metadata);
    return RunConfig::from_map(meta.at("config").get<std::map<std::string, std::string>>());
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint metadata: ") + e.what());
  }
}

TrainingState checkpoint_state(const CheckpointData& data) {
  try {
    const json meta = json::parse(data.metadata);
    return {meta.at("epoch").get<std::size_t>(), meta.at("best_val").get<double>(),
            meta.at("rng").get<std::string>()};
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint metadata: ") + e.what());
  }
}

void restore(const CheckpointData& data, Model& model, AdamW* optimizer) {
  json meta;
  try {
    meta = json::parse(data.metadata);
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint metadata: ") + e.what());
  }
  const auto& entries = model.params().entries();
  for (const auto& e : entries) {
    Tensor t = e.tensor;
    const auto& rec = need(data, "param/" + e.name, t.numel());
    if (rec.shape != t.shape()) throw DataError("checkpoint tensor " + e.name + " has wrong shape");
    std::copy(rec.values.begin(), rec.values.end(), t.mutable_data().begin());
  }
  auto& bank = model.bank();
  const std::size_t n_p = bank.config().size, c1 = bank.config().dim;
  bank.set_state(need(data, "bank/codebook", n_p * c1).values,
                 need(data, "bank/cluster_size", n_p).values,
                 need(data, "bank/running_sum", n_p * c1).values,
                 meta.value("bank_updates", std::uint64_t{0}));
  if (optimizer != nullptr && meta.contains("adam")) {
    std::vector<std::vector<double>> m, v;
    for (const auto& e : entries) {
      m.push_back(need(data, "adam_m/" + e.name, e.tensor.numel()).values);
      v.push_back(need(data, "adam_v/" + e.name, e.tensor.numel()).values);
    }
    const auto& a = meta.at("adam");
    optimizer->set_state(std::move(m), std::move(v),
                         a.at("param_steps").get<std::vector<std::uint64_t>>(),
                         a.at("steps").get<std::uint64_t>(), a.at("skipped").get<std::uint64_t>());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, const AdamW* optimizer,
                     const TrainingState& state) {
  write_checkpoint(path, capture(model, optimizer, state));
}

}  // namespace paml
