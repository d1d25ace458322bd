// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#include "msdetr/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace msdetr {

namespace {

using nlohmann::json;

json config_to_json(const ModelConfig& c) {
  json j;
  j["levels"] = c.levels;
  j["d_model"] = c.d_model;
  j["encoder_layers"] = c.encoder_layers;
  j["decoder_layers"] = c.decoder_layers;
  j["heads"] = c.heads;
  j["points"] = c.points;
  j["queries"] = c.queries;
  j["classes"] = c.classes;
  j["rep"] = c.rep;
  j["da"] = c.da;
  j["csff"] = c.csff;
  j["backbone_widths"] = c.backbone_widths;
  j["backbone_blocks"] = c.backbone_blocks;
  j["ffn_mult"] = c.ffn_mult;
  j["vov_depth"] = c.vov_depth;
  j["aux_loss"] = c.aux_loss;
  j["init_seed"] = c.init_seed;
  return j;
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.levels = j.at("levels");
  c.d_model = j.at("d_model");
  c.encoder_layers = j.at("encoder_layers");
  c.decoder_layers = j.at("decoder_layers");
  c.heads = j.at("heads");
  c.points = j.at("points");
  c.queries = j.at("queries");
  c.classes = j.at("classes");
  c.rep = j.at("rep");
  c.da = j.at("da");
  c.csff = j.at("csff");
  c.backbone_widths = j.at("backbone_widths").get<std::vector<int64_t>>();
  c.backbone_blocks = j.at("backbone_blocks").get<std::vector<int64_t>>();
  c.ffn_mult = j.at("ffn_mult");
  c.vov_depth = j.at("vov_depth");
  c.aux_loss = j.at("aux_loss");
  c.init_seed = j.at("init_seed");
  return c;
}

// every stored entry is a named float64 vector with a shape annotation
struct Entry {
  std::string name;
  Shape4 shape;
  std::vector<double> data;
};

template <typename T>
std::vector<Entry> gather_entries(ModelT<T>& model, bool& any_fused) {
  std::vector<Entry> entries;
  for (auto& ref : model.params()) {
    const auto& v = ref.tensor->values();
    entries.push_back({ref.name, ref.tensor->shape(), std::vector<double>(v.begin(), v.end())});
  }
  for (auto& ref : model.buffers()) {
    entries.push_back({ref.name, Shape4::vec(static_cast<int64_t>(ref.buffer->size())),
                       std::vector<double>(ref.buffer->begin(), ref.buffer->end())});
  }
  any_fused = false;
  for (size_t s = 0; s < model.stages.size(); ++s)
    for (size_t i = 0; i < model.stages[s].size(); ++i) {
      auto& block = model.stages[s][i];
      if (!block.use_fused) continue;
      any_fused = true;
      const std::string prefix = "backbone.s" + std::to_string(s) + ".b" + std::to_string(i);
      const auto& wv = block.fused.w.values();
      entries.push_back(
          {prefix + ".fused_w", block.fused.w.shape(), std::vector<double>(wv.begin(), wv.end())});
      entries.push_back({prefix + ".fused_b", Shape4::vec(static_cast<int64_t>(block.fused.b.size())),
                         std::vector<double>(block.fused.b.begin(), block.fused.b.end())});
    }
  std::sort(entries.begin(), entries.end(),
            [](const Entry& a, const Entry& b) { return a.name < b.name; });
  return entries;
}

}  // namespace

template <typename T>
void save_checkpoint(const std::string& path, ModelT<T>& model) {
  bool any_fused = false;
  auto entries = gather_entries(model, any_fused);

  json manifest;
  manifest["config"] = config_to_json(model.cfg);
  manifest["fused"] = any_fused;
  json dir;
  uint64_t offset = 0;
  for (const auto& e : entries) {
    json t;
    t["shape"] = {e.shape.n, e.shape.c, e.shape.h, e.shape.w};
    t["dtype"] = "f64";
    t["offset"] = offset;
    dir[e.name] = t;
    offset += e.data.size() * sizeof(double);
  }
  manifest["tensors"] = dir;
  const std::string mjson = manifest.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw EvalError("checkpoint: cannot open for write: " + path);
  out.write(kCheckpointMagic, 5);
  const uint64_t mlen = mjson.size();
  out.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
  out.write(mjson.data(), static_cast<std::streamsize>(mjson.size()));
  for (const auto& e : entries)
    out.write(reinterpret_cast<const char*>(e.data.data()),
              static_cast<std::streamsize>(e.data.size() * sizeof(double)));
  if (!out) throw EvalError("checkpoint: write failed: " + path);
}

namespace {

struct RawCheckpoint {
  json manifest;
  std::vector<char> payload;
};

RawCheckpoint read_raw(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw EvalError("checkpoint: cannot open: " + path);
  char magic[5];
  in.read(magic, 5);
  if (!in || std::memcmp(magic, kCheckpointMagic, 5) != 0)
    throw EvalError("checkpoint: bad magic in " + path);
  uint64_t mlen = 0;
  in.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
  std::string mjson(mlen, '\0');
  in.read(mjson.data(), static_cast<std::streamsize>(mlen));
  if (!in) throw EvalError("checkpoint: truncated manifest in " + path);
  RawCheckpoint raw;
  raw.manifest = json::parse(mjson);
  raw.payload.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  return raw;
}

std::vector<double> read_entry(const RawCheckpoint& raw, const std::string& name,
                               Shape4* shape_out = nullptr) {
  const auto& dir = raw.manifest.at("tensors");
  if (!dir.contains(name)) throw EvalError("checkpoint: missing tensor '" + name + "'");
  const auto& t = dir.at(name);
  const auto sh = t.at("shape").get<std::vector<int64_t>>();
  const Shape4 shape{sh[0], sh[1], sh[2], sh[3]};
  if (shape_out) *shape_out = shape;
  const uint64_t offset = t.at("offset");
  const size_t count = static_cast<size_t>(shape.numel());
  if (offset + count * sizeof(double) > raw.payload.size())
    throw EvalError("checkpoint: tensor '" + name + "' exceeds payload");
  std::vector<double> v(count);
  std::memcpy(v.data(), raw.payload.data() + offset, count * sizeof(double));
  return v;
}

}  // namespace

ModelConfig peek_checkpoint_config(const std::string& path) {
  return config_from_json(read_raw(path).manifest.at("config"));
}

template <typename T>
ModelT<T> load_checkpoint(const std::string& path) {
  RawCheckpoint raw = read_raw(path);
  ModelConfig cfg = config_from_json(raw.manifest.at("config"));
  ModelT<T> model = build<T>(cfg);
  const bool fused = raw.manifest.value("fused", false);
  if (fused)
    for (auto& stage : model.stages)
      for (auto& block : stage)
        if (block.is_rep) block.use_fused = true;

  for (auto& ref : model.params()) {
    Shape4 shape;
    auto v = read_entry(raw, ref.name, &shape);
    check(shape == ref.tensor->shape(), "checkpoint: shape mismatch for " + ref.name);
    std::vector<T> tv(v.begin(), v.end());
    *ref.tensor = TensorT<T>(shape, std::move(tv), /*requires_grad=*/true);
  }
  for (auto& ref : model.buffers()) {
    auto v = read_entry(raw, ref.name);
    ref.buffer->assign(v.begin(), v.end());
  }
  if (fused) {
    for (size_t s = 0; s < model.stages.size(); ++s)
      for (size_t i = 0; i < model.stages[s].size(); ++i) {
        auto& block = model.stages[s][i];
        if (!block.use_fused) continue;
        const std::string prefix = "backbone.s" + std::to_string(s) + ".b" + std::to_string(i);
        Shape4 wshape;
        auto w = read_entry(raw, prefix + ".fused_w", &wshape);
        auto b = read_entry(raw, prefix + ".fused_b");
        block.fused.w = TensorT<T>(wshape, std::vector<T>(w.begin(), w.end()));
        block.fused.b.assign(b.begin(), b.end());
        block.fused.stride = block.rep.stride;
      }
  }
  return model;
}

template void save_checkpoint<double>(const std::string&, ModelT<double>&);
template void save_checkpoint<float>(const std::string&, ModelT<float>&);
template ModelT<double> load_checkpoint<double>(const std::string&);
template ModelT<float> load_checkpoint<float>(const std::string&);

}  // namespace msdetr
