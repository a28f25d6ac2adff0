#pragma once

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "dan/config.hpp"
#include "dan/losses.hpp"
#include "dan/optimizer.hpp"

namespace dan {

constexpr char kCheckpointMagic[8] = {'D', 'A', 'N', 'C', 'K', 'P', 'T', '\n'};
constexpr int kCheckpointVersion = 1;

// Everything needed to resume training or run inference.
template <typename S>
struct TrainState {
  OptimizerState<S> optim;
  ClassCenters<S> centers;
  double best_score = 0.0;
  bool has_best = false;

  explicit TrainState(const ModelConfig& cfg)
      : centers(cfg.task == Task::EXPR ? cfg.num_classes : 9, cfg.feature_dim()) {}
};

template <typename S>
struct Checkpoint {
  TrainConfig config;
  Model<S> model;
  TrainState<S> state;

  explicit Checkpoint(const TrainConfig& cfg)
      : config(cfg), model(cfg.model), state(cfg.model) {}
};

namespace detail {

template <typename S>
constexpr const char* dtype_name() {
  return sizeof(S) == 4 ? "f32" : "f64";
}

}  // namespace detail

// Container: 8-byte magic, little-endian u64 header length, JSON header
// {format_version, config, state, tensor index}, then the raw arrays in index
// order. Round-trips bit-exactly.
template <typename S>
void checkpoint_save(const Checkpoint<S>& ckpt, const std::string& path) {
  json index = json::array();
  std::vector<std::pair<const S*, std::int64_t>> blobs;
  std::int64_t offset = 0;
  auto add_blob = [&](const std::string& name, const S* data, const std::vector<std::int64_t>& shape) {
    std::int64_t count = 1;
    for (auto e : shape) count *= e;
    index.push_back(json{{"name", name},
                         {"shape", shape},
                         {"offset", offset},
                         {"dtype", detail::dtype_name<S>()}});
    blobs.emplace_back(data, count);
    offset += count * static_cast<std::int64_t>(sizeof(S));
  };

  for (const auto& [name, t] : ckpt.model.params().items()) {
    std::vector<std::int64_t> shape(t.shape().begin(), t.shape().end());
    add_blob(name, t.data(), shape);
  }
  const auto& stats = ckpt.model.task_bn_stats();
  add_blob("bn.task.running_mean", stats.mean.data(), {static_cast<std::int64_t>(stats.mean.size())});
  add_blob("bn.task.running_var", stats.var.data(), {static_cast<std::int64_t>(stats.var.size())});
  const auto& centers = ckpt.state.centers.tensor();
  add_blob("centers", centers.data(), {centers.extent(0), centers.extent(1)});
  for (std::size_t pi = 0; pi < ckpt.state.optim.m.size(); ++pi) {
    const std::string& pname = ckpt.model.params().items()[pi].first;
    add_blob("optim.m." + pname, ckpt.state.optim.m[pi].data(),
             {static_cast<std::int64_t>(ckpt.state.optim.m[pi].size())});
    add_blob("optim.v." + pname, ckpt.state.optim.v[pi].data(),
             {static_cast<std::int64_t>(ckpt.state.optim.v[pi].size())});
  }

  std::vector<int> active;
  for (bool a : ckpt.state.centers.active()) active.push_back(a ? 1 : 0);
  json header{{"format_version", kCheckpointVersion},
              {"config", to_json(ckpt.config)},
              {"state",
               json{{"step", ckpt.state.optim.step},
                    {"best_score", ckpt.state.best_score},
                    {"has_best", ckpt.state.has_best},
                    {"centers_active", active}}},
              {"tensors", index}};
  std::string hs = header.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint: cannot write " + path);
  f.write(kCheckpointMagic, 8);
  std::uint64_t hlen = hs.size();
  char lenbuf[8];
  for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<char>((hlen >> (8 * i)) & 0xff);
  f.write(lenbuf, 8);
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [data, count] : blobs)
    f.write(reinterpret_cast<const char*>(data), count * static_cast<std::streamsize>(sizeof(S)));
  if (!f) throw IoError("checkpoint: short write to " + path);
}

template <typename S>
Checkpoint<S> checkpoint_load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint: cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  if (f.gcount() != 8 || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw CheckpointError(path + ": bad magic at offset 0");
  char lenbuf[8];
  f.read(lenbuf, 8);
  if (f.gcount() != 8) throw CheckpointError(path + ": truncated header length at offset 8");
  std::uint64_t hlen = 0;
  for (int i = 0; i < 8; ++i)
    hlen |= static_cast<std::uint64_t>(static_cast<unsigned char>(lenbuf[i])) << (8 * i);
  std::string hs(hlen, '\0');
  f.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (static_cast<std::uint64_t>(f.gcount()) != hlen)
    throw CheckpointError(path + ": truncated header at offset 16");

  json header;
  try {
    header = json::parse(hs);
  } catch (const json::exception& e) {
    throw CheckpointError(path + ": unparsable header: " + e.what());
  }
  int version = header.value("format_version", -1);
  if (version != kCheckpointVersion)
    throw CheckpointError(path + ": format version " + std::to_string(version) +
                          ", expected " + std::to_string(kCheckpointVersion));

  TrainConfig cfg = train_config_from_json(header.at("config"));
  Checkpoint<S> ckpt(cfg);
  ckpt.state.optim.init(ckpt.model.params());
  const json& st = header.at("state");
  ckpt.state.optim.step = st.at("step").get<std::int64_t>();
  ckpt.state.best_score = st.at("best_score").get<double>();
  ckpt.state.has_best = st.at("has_best").get<bool>();
  std::vector<bool> active;
  for (int a : st.at("centers_active").get<std::vector<int>>()) active.push_back(a != 0);
  ckpt.state.centers.set_active_flags(active);

  std::uint64_t payload_base = 16 + hlen;
  auto read_blob = [&](const json& entry, S* dst, std::int64_t expect_count) {
    std::int64_t count = 1;
    for (auto e : entry.at("shape").get<std::vector<std::int64_t>>()) count *= e;
    if (count != expect_count)
      throw CheckpointError(path + ": tensor '" + entry.at("name").get<std::string>() +
                            "' has unexpected shape");
    if (entry.at("dtype").get<std::string>() != detail::dtype_name<S>())
      throw CheckpointError(path + ": dtype mismatch for '" +
                            entry.at("name").get<std::string>() + "'");
    std::uint64_t off = payload_base + entry.at("offset").get<std::uint64_t>();
    f.seekg(static_cast<std::streamoff>(off));
    f.read(reinterpret_cast<char*>(dst), count * static_cast<std::streamsize>(sizeof(S)));
    if (f.gcount() != count * static_cast<std::streamsize>(sizeof(S)))
      throw CheckpointError(path + ": truncated payload at offset " + std::to_string(off));
  };

  auto find_entry = [&](const std::string& name) -> const json& {
    for (const auto& e : header.at("tensors"))
      if (e.at("name").get<std::string>() == name) return e;
    throw CheckpointError(path + ": missing tensor '" + name + "'");
  };

  for (auto& [name, t] : ckpt.model.params().items()) read_blob(find_entry(name), t.data(), t.size());
  auto& stats = ckpt.model.task_bn_stats();
  read_blob(find_entry("bn.task.running_mean"), stats.mean.data(),
            static_cast<std::int64_t>(stats.mean.size()));
  read_blob(find_entry("bn.task.running_var"), stats.var.data(),
            static_cast<std::int64_t>(stats.var.size()));
  auto& centers = ckpt.state.centers.tensor();
  read_blob(find_entry("centers"), centers.data(), centers.size());
  for (std::size_t pi = 0; pi < ckpt.model.params().items().size(); ++pi) {
    const std::string& pname = ckpt.model.params().items()[pi].first;
    read_blob(find_entry("optim.m." + pname), ckpt.state.optim.m[pi].data(),
              static_cast<std::int64_t>(ckpt.state.optim.m[pi].size()));
    read_blob(find_entry("optim.v." + pname), ckpt.state.optim.v[pi].data(),
              static_cast<std::int64_t>(ckpt.state.optim.v[pi].size()));
  }
  return ckpt;
}

}  // namespace dan
