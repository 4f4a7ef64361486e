#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mpg/model.hpp"
#include "mpg/optim.hpp"

namespace mpg {

// On-disk layout: magic "MPGN", u32 version, u32 record count, then per
// record: u16 name length, name bytes, u8 rank, rank x u32 dims, f32
// little-endian payload. Optimizer moments use the "m." / "v." name prefixes,
// batch-norm running stats the "rs." prefix, config and counters "cfg." /
// "meta.".
struct TensorRecord {
  std::string name;
  std::vector<uint32_t> dims;
  std::vector<float> data;

  long total() const {
    long t = 1;
    for (uint32_t d : dims) t *= d;
    return t;
  }
};

namespace detail {

constexpr uint32_t kCheckpointVersion = 1;

template <typename V>
void write_pod(std::ofstream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::ifstream& is, const std::string& path) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!is) throw DataError("truncated checkpoint " + path);
  return v;
}

inline TensorRecord scalar_record(const std::string& name, float v) {
  return {name, {1}, {v}};
}

inline float bitcast_u32(uint32_t v) {
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

inline uint32_t bitcast_f32(float f) {
  uint32_t v;
  std::memcpy(&v, &f, 4);
  return v;
}

}  // namespace detail

inline void write_records(const std::string& path, const std::vector<TensorRecord>& records) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  os.write("MPGN", 4);
  detail::write_pod<uint32_t>(os, detail::kCheckpointVersion);
  detail::write_pod<uint32_t>(os, static_cast<uint32_t>(records.size()));
  for (const auto& r : records) {
    detail::write_pod<uint16_t>(os, static_cast<uint16_t>(r.name.size()));
    os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    detail::write_pod<uint8_t>(os, static_cast<uint8_t>(r.dims.size()));
    for (uint32_t d : r.dims) detail::write_pod<uint32_t>(os, d);
    os.write(reinterpret_cast<const char*>(r.data.data()),
             static_cast<std::streamsize>(r.data.size() * sizeof(float)));
  }
  if (!os) throw DataError("short write to " + path);
}

inline std::map<std::string, TensorRecord> read_records(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "MPGN", 4) != 0)
    throw DataError("not a checkpoint file (bad magic): " + path);
  const uint32_t version = detail::read_pod<uint32_t>(is, path);
  if (version != detail::kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  const uint32_t count = detail::read_pod<uint32_t>(is, path);
  std::map<std::string, TensorRecord> out;
  for (uint32_t i = 0; i < count; ++i) {
    TensorRecord r;
    const uint16_t nlen = detail::read_pod<uint16_t>(is, path);
    r.name.resize(nlen);
    is.read(r.name.data(), nlen);
    const uint8_t rank = detail::read_pod<uint8_t>(is, path);
    r.dims.resize(rank);
    for (auto& d : r.dims) d = detail::read_pod<uint32_t>(is, path);
    r.data.resize(static_cast<size_t>(r.total()));
    is.read(reinterpret_cast<char*>(r.data.data()),
            static_cast<std::streamsize>(r.data.size() * sizeof(float)));
    if (!is) throw DataError("truncated checkpoint " + path);
    out[r.name] = std::move(r);
  }
  return out;
}

struct CheckpointMeta {
  int epoch = 0;
  int step = 0;
  uint64_t seed = 0;
  int adam_t = 0;
};

namespace detail {

inline void append_stage_stats(std::vector<TensorRecord>& recs, const std::string& prefix,
                               const BnStats<float>& st) {
  if (!st.initialized) return;
  recs.push_back({prefix + ".mean", {static_cast<uint32_t>(st.mean.size())}, st.mean});
  recs.push_back({prefix + ".var", {static_cast<uint32_t>(st.var.size())}, st.var});
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, Model<float>& model, const AdamState* adam,
                            const CheckpointMeta& meta) {
  const ModelConfig& cfg = model.config();
  std::vector<TensorRecord> recs;
  recs.push_back(detail::scalar_record("cfg.in_channels", static_cast<float>(cfg.in_channels)));
  recs.push_back(detail::scalar_record("cfg.class_count", static_cast<float>(cfg.class_count)));
  recs.push_back({"cfg.stage_channels",
                  {4},
                  {static_cast<float>(cfg.stage_channels[0]), static_cast<float>(cfg.stage_channels[1]),
                   static_cast<float>(cfg.stage_channels[2]), static_cast<float>(cfg.stage_channels[3])}});
  recs.push_back(detail::scalar_record("cfg.frm_enabled", cfg.frm_enabled ? 1.0f : 0.0f));
  recs.push_back(detail::scalar_record("cfg.mpga_enabled", cfg.mpga_enabled ? 1.0f : 0.0f));
  recs.push_back(detail::scalar_record("cfg.frm_reduction", static_cast<float>(cfg.frm_reduction)));
  recs.push_back(detail::scalar_record("meta.epoch", static_cast<float>(meta.epoch)));
  recs.push_back(detail::scalar_record("meta.step", static_cast<float>(meta.step)));
  recs.push_back(detail::scalar_record("meta.adam_t", static_cast<float>(meta.adam_t)));
  recs.push_back({"meta.seed",
                  {2},
                  {detail::bitcast_u32(static_cast<uint32_t>(meta.seed & 0xffffffffull)),
                   detail::bitcast_u32(static_cast<uint32_t>(meta.seed >> 32))}});

  for (const auto& p : model.parameters()) {
    const Shape4 s = p.value.shape();
    recs.push_back({p.name,
                    {static_cast<uint32_t>(s.n), static_cast<uint32_t>(s.c),
                     static_cast<uint32_t>(s.h), static_cast<uint32_t>(s.w)},
                    {p.value.data(), p.value.data() + p.value.size()}});
  }
  for (int i = 0; i < 4; ++i)
    detail::append_stage_stats(recs, "rs.enc" + std::to_string(i + 1),
                               model.encoder(i).bn_stats);
  for (int i = 0; i < 3; ++i)
    detail::append_stage_stats(recs, "rs.dec" + std::to_string(i + 1),
                               model.decoder(i).bn_stats);
  if (adam != nullptr) {
    const auto& params = model.parameters();
    for (size_t i = 0; i < params.size(); ++i) {
      const Shape4 s = params[i].value.shape();
      const std::vector<uint32_t> dims = {static_cast<uint32_t>(s.n), static_cast<uint32_t>(s.c),
                                          static_cast<uint32_t>(s.h), static_cast<uint32_t>(s.w)};
      recs.push_back({"m." + params[i].name, dims, adam->m[i]});
      recs.push_back({"v." + params[i].name, dims, adam->v[i]});
    }
  }
  write_records(path, recs);
}

struct Checkpoint {
  ModelConfig config;
  CheckpointMeta meta;
  std::map<std::string, TensorRecord> records;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  Checkpoint c;
  c.records = read_records(path);
  auto need = [&](const std::string& name) -> const TensorRecord& {
    auto it = c.records.find(name);
    if (it == c.records.end()) throw DataError("checkpoint missing record " + name);
    return it->second;
  };
  c.config.in_channels = static_cast<int>(need("cfg.in_channels").data[0]);
  c.config.class_count = static_cast<int>(need("cfg.class_count").data[0]);
  const auto& sc = need("cfg.stage_channels");
  for (int i = 0; i < 4; ++i) c.config.stage_channels[i] = static_cast<int>(sc.data[i]);
  c.config.frm_enabled = need("cfg.frm_enabled").data[0] != 0.0f;
  c.config.mpga_enabled = need("cfg.mpga_enabled").data[0] != 0.0f;
  c.config.frm_reduction = static_cast<int>(need("cfg.frm_reduction").data[0]);
  c.meta.epoch = static_cast<int>(need("meta.epoch").data[0]);
  c.meta.step = static_cast<int>(need("meta.step").data[0]);
  c.meta.adam_t = static_cast<int>(need("meta.adam_t").data[0]);
  const auto& seed = need("meta.seed");
  c.meta.seed = static_cast<uint64_t>(detail::bitcast_f32(seed.data[0])) |
                (static_cast<uint64_t>(detail::bitcast_f32(seed.data[1])) << 32);
  return c;
}

namespace detail {

inline void restore_stage_stats(const Checkpoint& c, const std::string& prefix,
                                BnStats<float>& st, int channels) {
  auto mit = c.records.find(prefix + ".mean");
  auto vit = c.records.find(prefix + ".var");
  if (mit == c.records.end() || vit == c.records.end()) return;
  if (static_cast<int>(mit->second.data.size()) != channels)
    throw DataError("checkpoint running stats " + prefix + " have wrong channel count");
  st.mean = mit->second.data;
  st.var = vit->second.data;
  st.initialized = true;
}

}  // namespace detail

inline Model<float> model_from_checkpoint(const Checkpoint& c) {
  Model<float> model = Model<float>::build(c.config, c.meta.seed);
  for (auto& p : model.parameters()) {
    auto it = c.records.find(p.name);
    if (it == c.records.end()) throw DataError("checkpoint missing parameter " + p.name);
    if (it->second.total() != p.value.size())
      throw DataError("checkpoint parameter " + p.name + " has wrong size");
    std::copy(it->second.data.begin(), it->second.data.end(), p.value.data());
  }
  for (int i = 0; i < 4; ++i)
    detail::restore_stage_stats(c, "rs.enc" + std::to_string(i + 1),
                                model.encoder(i).bn_stats, model.config().stage_channels[i]);
  for (int i = 0; i < 3; ++i)
    detail::restore_stage_stats(c, "rs.dec" + std::to_string(i + 1),
                                model.decoder(i).bn_stats, model.config().stage_channels[2 - i]);
  return model;
}

inline void adam_from_checkpoint(const Checkpoint& c, const Model<float>& model, AdamState& st) {
  st.init(model.parameters());
  st.t = c.meta.adam_t;
  const auto& params = model.parameters();
  for (size_t i = 0; i < params.size(); ++i) {
    auto mit = c.records.find("m." + params[i].name);
    auto vit = c.records.find("v." + params[i].name);
    if (mit == c.records.end() || vit == c.records.end()) continue;
    st.m[i] = mit->second.data;
    st.v[i] = vit->second.data;
  }
}

}  // namespace mpg
