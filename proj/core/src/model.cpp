// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#include "msdetr/model.hpp"

#include <cmath>

namespace msdetr {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (levels < 1) fail("levels (" + std::to_string(levels) + ") must be >= 1");
  if (d_model < 1) fail("d_model must be >= 1");
  if (heads < 1) fail("heads must be >= 1");
  if (d_model % heads != 0)
    fail("d_model (" + std::to_string(d_model) + ") not divisible by heads (" +
         std::to_string(heads) + ")");
  if (points < 1) fail("points must be >= 1");
  if (encoder_layers < 1) fail("encoder_layers must be >= 1");
  if (decoder_layers < 1) fail("decoder_layers must be >= 1");
  if (queries < 1) fail("queries must be >= 1");
  if (classes < 1) fail("classes must be >= 1");
  if (ffn_mult < 1) fail("ffn_mult must be >= 1");
  if (vov_depth < 1) fail("vov_depth must be >= 1");
  if (static_cast<int64_t>(backbone_widths.size()) != levels + 1)
    fail("backbone_widths needs levels+1 = " + std::to_string(levels + 1) + " entries, got " +
         std::to_string(backbone_widths.size()));
  if (static_cast<int64_t>(backbone_blocks.size()) != levels)
    fail("backbone_blocks needs levels = " + std::to_string(levels) + " entries, got " +
         std::to_string(backbone_blocks.size()));
  for (int64_t w : backbone_widths)
    if (w < 1) fail("backbone_widths entries must be >= 1");
  for (int64_t b : backbone_blocks)
    if (b < 1) fail("backbone_blocks entries must be >= 1");
  if (csff && d_model % 2 != 0) fail("d_model must be even for the fusion neck channel split");
}

ModelConfig ModelConfig::desk_default() { return ModelConfig{}; }

ModelConfig ModelConfig::full_scale() {
  ModelConfig c;
  c.levels = 4;
  c.d_model = 256;
  c.encoder_layers = 6;
  c.decoder_layers = 6;
  c.heads = 8;
  c.points = 4;
  c.queries = 300;
  c.backbone_widths = {64, 128, 256, 256, 256};
  c.backbone_blocks = {1, 1, 1, 1};
  return c;
}

template <typename T>
TensorT<T> BackboneBlock<T>::forward(const TensorT<T>& x, bool training) {
  if (!is_rep) return plain.forward(x, training);
  if (use_fused) return fused.forward(x);
  return rep_forward_train(rep, x, training);
}

template <typename T>
ModelT<T> build(const ModelConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.init_seed);
  ModelT<T> m;
  m.cfg = cfg;

  m.stem = ConvBnAct<T>::make(3, cfg.backbone_widths[0], 3, 2, 1, rng);
  for (int64_t l = 0; l < cfg.levels; ++l) {
    const int64_t in = cfg.backbone_widths[static_cast<size_t>(l)];
    const int64_t out = cfg.backbone_widths[static_cast<size_t>(l + 1)];
    std::vector<BackboneBlock<T>> stage;
    for (int64_t b = 0; b < cfg.backbone_blocks[static_cast<size_t>(l)]; ++b) {
      BackboneBlock<T> block;
      const int64_t bin = b == 0 ? in : out;
      const int64_t stride = b == 0 ? 2 : 1;
      if (cfg.rep) {
        block.is_rep = true;
        block.rep = RepBlock<T>::make(bin, out, stride, rng);
      } else {
        block.plain = ConvBnAct<T>::make(bin, out, 3, stride, 1, rng);
      }
      stage.push_back(std::move(block));
    }
    m.stages.push_back(std::move(stage));
    m.laterals.push_back(
        ConvBnAct<T>::make(out, cfg.d_model, 1, 1, 0, rng, /*act=*/false));
  }

  const int64_t ffn_hidden = cfg.d_model * cfg.ffn_mult;
  if (cfg.da) {
    for (int64_t i = 0; i < cfg.encoder_layers; ++i)
      m.encoder.push_back(
          EncoderLayerT<T>::make(cfg.d_model, cfg.heads, cfg.points, cfg.levels, ffn_hidden, rng));
  } else {
    for (int64_t i = 0; i < cfg.encoder_layers; ++i) {
      std::vector<ConvBnAct<T>> per_level;
      for (int64_t l = 0; l < cfg.levels; ++l)
        per_level.push_back(ConvBnAct<T>::make(cfg.d_model, cfg.d_model, 3, 1, 1, rng));
      m.refine.push_back(std::move(per_level));
    }
  }

  m.neck = FuseNeck<T>::make(cfg.d_model, cfg.levels, cfg.vov_depth, rng);
  m.queries = QuerySetT<T>::make(cfg.queries, cfg.d_model, rng);
  for (int64_t i = 0; i < cfg.decoder_layers; ++i)
    m.decoder.push_back(
        DecoderLayerT<T>::make(cfg.d_model, cfg.heads, cfg.points, cfg.levels, ffn_hidden, rng));
  m.heads = PredictHeads<T>::make(cfg.d_model, cfg.classes, rng);
  return m;
}

template <typename T>
MultiScaleFeaturesT<T> ModelT<T>::backbone_forward(const TensorT<T>& image, bool training) {
  const Shape4 s = image.shape();
  check(s.c == 3, "forward: image must have 3 channels, got " + std::to_string(s.c));
  const int64_t div = int64_t(1) << (cfg.levels + 1);
  check(s.h % div == 0 && s.w % div == 0,
        "forward: input " + std::to_string(s.h) + "x" + std::to_string(s.w) +
            " must be divisible by 2^(L+1) = " + std::to_string(div));

  TensorT<T> x = stem.forward(image, training);
  MultiScaleFeaturesT<T> feats;
  for (size_t l = 0; l < stages.size(); ++l) {
    for (auto& block : stages[l]) x = block.forward(x, training);
    feats.levels.push_back(laterals[l].forward(x, training));
  }
  return feats;
}

template <typename T>
MultiScaleFeaturesT<T> ModelT<T>::encode(const TensorT<T>& image, bool training) {
  MultiScaleFeaturesT<T> feats = backbone_forward(image, training);
  if (cfg.da) {
    for (auto& layer : encoder) feats = layer.forward(feats);
  } else {
    for (auto& per_level : refine) {
      MultiScaleFeaturesT<T> next;
      for (int64_t l = 0; l < feats.size(); ++l)
        next.levels.push_back(per_level[static_cast<size_t>(l)].forward(feats.levels[l], training));
      feats = std::move(next);
    }
  }
  return cfg.csff ? neck.forward(feats, training) : neck.td.forward(feats, training);
}

namespace {

template <typename T>
struct TiledQueries {
  TensorT<T> rows, refs, ref_logits;
};

template <typename T>
TiledQueries<T> tile_queries(const QuerySetT<T>& q, int64_t batch) {
  std::vector<TensorT<T>> emb(static_cast<size_t>(batch), q.embeddings);
  std::vector<TensorT<T>> refs(static_cast<size_t>(batch), q.ref_points());
  std::vector<TensorT<T>> logits(static_cast<size_t>(batch), q.ref_logits);
  if (batch == 1) return {emb[0], refs[0], logits[0]};
  return {concat_rows(emb), concat_rows(refs), concat_rows(logits)};
}

}  // namespace

template <typename T>
DetectionsT<T> ModelT<T>::forward(const TensorT<T>& image, bool training) {
  MultiScaleFeaturesT<T> fused = encode(image, training);
  const int64_t batch = image.shape().n;
  TiledQueries<T> q = tile_queries(queries, batch);
  TensorT<T> rows = q.rows;
  std::vector<int64_t> row_item(static_cast<size_t>(batch * cfg.queries));
  for (size_t r = 0; r < row_item.size(); ++r)
    row_item[r] = static_cast<int64_t>(r) / cfg.queries;
  for (auto& layer : decoder) rows = layer.forward(rows, q.refs, fused, row_item);
  return heads.forward(rows, q.ref_logits);
}

template <typename T>
std::vector<DetectionsT<T>> ModelT<T>::forward_all_layers(const TensorT<T>& image, bool training) {
  MultiScaleFeaturesT<T> fused = encode(image, training);
  const int64_t batch = image.shape().n;
  TiledQueries<T> q = tile_queries(queries, batch);
  TensorT<T> rows = q.rows;
  std::vector<int64_t> row_item(static_cast<size_t>(batch * cfg.queries));
  for (size_t r = 0; r < row_item.size(); ++r)
    row_item[r] = static_cast<int64_t>(r) / cfg.queries;
  std::vector<DetectionsT<T>> out;
  for (auto& layer : decoder) {
    rows = layer.forward(rows, q.refs, fused, row_item);
    out.push_back(heads.forward(rows, q.ref_logits));
  }
  return out;
}

template <typename T>
ModelT<T> fuse_model(const ModelT<T>& model) {
  ModelT<T> out = model;
  for (auto& stage : out.stages)
    for (auto& block : stage)
      if (block.is_rep && !block.use_fused) {
        block.fused = fuse(block.rep);
        block.use_fused = true;
      }
  return out;
}

namespace {

template <typename T>
void collect_bn(const std::string& prefix, BatchNorm<T>& bn, std::vector<ParamRef<T>>& p,
                std::vector<BufferRef<T>>* b) {
  p.push_back({prefix + ".gamma", &bn.gamma});
  p.push_back({prefix + ".beta", &bn.beta});
  if (b) {
    b->push_back({prefix + ".running_mean", &bn.running_mean});
    b->push_back({prefix + ".running_var", &bn.running_var});
  }
}

template <typename T>
void collect_conv(const std::string& prefix, ConvBnAct<T>& c, std::vector<ParamRef<T>>& p,
                  std::vector<BufferRef<T>>* b) {
  p.push_back({prefix + ".w", &c.w});
  collect_bn(prefix + ".bn", c.bn, p, b);
}

template <typename T>
void collect_attn(const std::string& prefix, DeformAttnParams<T>& a, std::vector<ParamRef<T>>& p) {
  p.push_back({prefix + ".value_w", &a.value_w});
  p.push_back({prefix + ".value_b", &a.value_b});
  p.push_back({prefix + ".out_w", &a.out_w});
  p.push_back({prefix + ".out_b", &a.out_b});
  p.push_back({prefix + ".offset_w", &a.offset_w});
  p.push_back({prefix + ".offset_b", &a.offset_b});
  p.push_back({prefix + ".weight_w", &a.weight_w});
  p.push_back({prefix + ".weight_b", &a.weight_b});
}

template <typename T>
void collect_gs(const std::string& prefix, GsConv<T>& g, std::vector<ParamRef<T>>& p) {
  p.push_back({prefix + ".conv_w", &g.conv_w});
  p.push_back({prefix + ".conv_b", &g.conv_b});
  p.push_back({prefix + ".dw_w", &g.dw_w});
  p.push_back({prefix + ".dw_b", &g.dw_b});
}

template <typename T>
void collect_vov(const std::string& prefix, VovGscsp<T>& v, std::vector<ParamRef<T>>& p) {
  for (size_t i = 0; i < v.chain.size(); ++i)
    collect_gs(prefix + ".gs" + std::to_string(i), v.chain[i], p);
  p.push_back({prefix + ".proj_w", &v.proj_w});
  p.push_back({prefix + ".proj_b", &v.proj_b});
}

template <typename T>
void collect_ca(const std::string& prefix, ChannelAttention<T>& ca, std::vector<ParamRef<T>>& p) {
  p.push_back({prefix + ".fc1_w", &ca.fc1_w});
  p.push_back({prefix + ".fc1_b", &ca.fc1_b});
  p.push_back({prefix + ".fc2_w", &ca.fc2_w});
  p.push_back({prefix + ".fc2_b", &ca.fc2_b});
}

template <typename T>
void collect_all(ModelT<T>& m, std::vector<ParamRef<T>>& p, std::vector<BufferRef<T>>* b) {
  collect_conv("stem", m.stem, p, b);
  for (size_t s = 0; s < m.stages.size(); ++s) {
    for (size_t i = 0; i < m.stages[s].size(); ++i) {
      const std::string prefix = "backbone.s" + std::to_string(s) + ".b" + std::to_string(i);
      auto& block = m.stages[s][i];
      if (block.is_rep && block.use_fused) {
        // fused weights are inference-only state, handled by the checkpoint
      } else if (block.is_rep) {
        p.push_back({prefix + ".w3", &block.rep.w3});
        p.push_back({prefix + ".w1", &block.rep.w1});
        collect_bn(prefix + ".bn3", block.rep.bn3, p, b);
        collect_bn(prefix + ".bn1", block.rep.bn1, p, b);
        if (block.rep.has_identity) collect_bn(prefix + ".bnid", block.rep.bnid, p, b);
      } else {
        collect_conv(prefix, block.plain, p, b);
      }
    }
    collect_conv("lateral." + std::to_string(s), m.laterals[s], p, b);
  }
  for (size_t i = 0; i < m.encoder.size(); ++i) {
    const std::string prefix = "encoder." + std::to_string(i);
    auto& e = m.encoder[i];
    collect_attn(prefix + ".attn", e.attn, p);
    p.push_back({prefix + ".ln1_g", &e.ln1_g});
    p.push_back({prefix + ".ln1_b", &e.ln1_b});
    p.push_back({prefix + ".ln2_g", &e.ln2_g});
    p.push_back({prefix + ".ln2_b", &e.ln2_b});
    p.push_back({prefix + ".ffn_w1", &e.ffn_w1});
    p.push_back({prefix + ".ffn_b1", &e.ffn_b1});
    p.push_back({prefix + ".ffn_w2", &e.ffn_w2});
    p.push_back({prefix + ".ffn_b2", &e.ffn_b2});
  }
  for (size_t i = 0; i < m.refine.size(); ++i)
    for (size_t l = 0; l < m.refine[i].size(); ++l)
      collect_conv("refine." + std::to_string(i) + "." + std::to_string(l), m.refine[i][l], p, b);

  collect_conv("neck.td.top", m.neck.td.top, p, b);
  for (size_t l = 0; l < m.neck.td.fusers.size(); ++l)
    collect_conv("neck.td.fuse" + std::to_string(l), m.neck.td.fusers[l], p, b);
  for (size_t l = 0; l < m.neck.bu.downs.size(); ++l) {
    collect_conv("neck.bu.down" + std::to_string(l), m.neck.bu.downs[l], p, b);
    collect_conv("neck.bu.fuse" + std::to_string(l), m.neck.bu.fusers[l], p, b);
  }
  for (size_t l = 0; l < m.neck.td_vov.size(); ++l) {
    collect_vov("neck.td_vov" + std::to_string(l), m.neck.td_vov[l], p);
    collect_ca("neck.td_ca" + std::to_string(l), m.neck.td_ca[l], p);
    collect_vov("neck.bu_vov" + std::to_string(l), m.neck.bu_vov[l], p);
    collect_ca("neck.bu_ca" + std::to_string(l), m.neck.bu_ca[l], p);
  }

  p.push_back({"queries.embeddings", &m.queries.embeddings});
  p.push_back({"queries.ref_logits", &m.queries.ref_logits});
  for (size_t i = 0; i < m.decoder.size(); ++i) {
    const std::string prefix = "decoder." + std::to_string(i);
    auto& d = m.decoder[i];
    auto& sa = d.self_attn;
    for (auto [suffix, t] : std::initializer_list<std::pair<const char*, TensorT<T>*>>{
             {".sa.wq", &sa.wq}, {".sa.bq", &sa.bq}, {".sa.wk", &sa.wk}, {".sa.bk", &sa.bk},
             {".sa.wv", &sa.wv}, {".sa.bv", &sa.bv}, {".sa.wo", &sa.wo}, {".sa.bo", &sa.bo},
             {".sa.ln_g", &sa.ln_g}, {".sa.ln_b", &sa.ln_b}})
      p.push_back({prefix + suffix, t});
    collect_attn(prefix + ".cross", d.cross, p);
    for (auto [suffix, t] : std::initializer_list<std::pair<const char*, TensorT<T>*>>{
             {".ln2_g", &d.ln2_g}, {".ln2_b", &d.ln2_b}, {".ffn_w1", &d.ffn_w1},
             {".ffn_b1", &d.ffn_b1}, {".ffn_w2", &d.ffn_w2}, {".ffn_b2", &d.ffn_b2},
             {".ln3_g", &d.ln3_g}, {".ln3_b", &d.ln3_b}})
      p.push_back({prefix + suffix, t});
  }
  p.push_back({"heads.cls_w", &m.heads.cls_w});
  p.push_back({"heads.cls_b", &m.heads.cls_b});
  p.push_back({"heads.box_w", &m.heads.box_w});
  p.push_back({"heads.box_b", &m.heads.box_b});
}

}  // namespace

template <typename T>
std::vector<ParamRef<T>> ModelT<T>::params() {
  std::vector<ParamRef<T>> p;
  collect_all(*this, p, static_cast<std::vector<BufferRef<T>>*>(nullptr));
  return p;
}

template <typename T>
std::vector<BufferRef<T>> ModelT<T>::buffers() {
  std::vector<ParamRef<T>> p;
  std::vector<BufferRef<T>> b;
  collect_all(*this, p, &b);
  return b;
}

template <typename T>
int64_t ModelT<T>::param_count() {
  int64_t total = 0;
  for (auto& ref : params()) total += ref.tensor->numel();
  return total;
}

namespace {

int64_t conv_flops(int64_t cin, int64_t cout, int64_t k, int64_t oh, int64_t ow, bool bn,
                   bool act) {
  int64_t f = 2 * cout * cin * k * k * oh * ow;
  if (bn) f += 2 * cout * oh * ow;
  if (act) f += 4 * cout * oh * ow;
  return f;
}

int64_t linear_flops(int64_t rows, int64_t in, int64_t out) { return 2 * rows * in * out; }

}  // namespace

template <typename T>
int64_t ModelT<T>::flops(int64_t height, int64_t width) const {
  int64_t total = 0;
  int64_t h = height / 2, w = width / 2;
  total += conv_flops(3, cfg.backbone_widths[0], 3, h, w, true, true);
  std::vector<std::pair<int64_t, int64_t>> level_sizes;
  for (int64_t l = 0; l < cfg.levels; ++l) {
    h /= 2;
    w /= 2;
    const int64_t in = cfg.backbone_widths[static_cast<size_t>(l)];
    const int64_t out = cfg.backbone_widths[static_cast<size_t>(l + 1)];
    for (int64_t b = 0; b < cfg.backbone_blocks[static_cast<size_t>(l)]; ++b) {
      const int64_t bin = b == 0 ? in : out;
      const auto& block = stages[static_cast<size_t>(l)][static_cast<size_t>(b)];
      if (block.is_rep)
        total += block.use_fused ? rep_flops_fused(bin, out, h, w)
                                 : rep_flops_train(bin, out, h, w, block.rep.has_identity);
      else
        total += conv_flops(bin, out, 3, h, w, true, true);
    }
    total += conv_flops(out, cfg.d_model, 1, h, w, true, false);
    level_sizes.emplace_back(h, w);
  }

  int64_t rows = 0;
  for (auto [lh, lw] : level_sizes) rows += lh * lw;
  const int64_t d = cfg.d_model, mlk = cfg.heads * cfg.levels * cfg.points;
  if (cfg.da) {
    for (int64_t i = 0; i < cfg.encoder_layers; ++i) {
      for (auto [lh, lw] : level_sizes) total += conv_flops(d, d, 1, lh, lw, false, false);
      total += linear_flops(rows, d, 3 * mlk);              // offsets + weights
      total += 8 * rows * mlk * (d / cfg.heads);            // sampling
      total += linear_flops(rows, d, d);                    // out proj
      total += 2 * linear_flops(rows, d, d * cfg.ffn_mult); // ffn
      total += 16 * rows * d;                               // norms and residuals
    }
  } else {
    for (int64_t i = 0; i < cfg.encoder_layers; ++i)
      for (auto [lh, lw] : level_sizes) total += conv_flops(d, d, 3, lh, lw, true, true);
  }

  // neck (same accounting whether plain or vov; constant across fusion state)
  for (size_t l = 0; l + 1 < level_sizes.size(); ++l) {
    auto [lh, lw] = level_sizes[l];
    total += 2 * conv_flops(d, d, 3, lh, lw, true, true);
  }

  const int64_t qrows = cfg.queries;
  for (int64_t i = 0; i < cfg.decoder_layers; ++i) {
    total += 4 * linear_flops(qrows, d, d) + 2 * qrows * qrows * d;
    total += linear_flops(qrows, d, 3 * mlk) + 8 * qrows * mlk * (d / cfg.heads) +
             linear_flops(qrows, d, d);
    total += 2 * linear_flops(qrows, d, d * cfg.ffn_mult);
    total += 24 * qrows * d;
  }
  total += linear_flops(qrows, d, cfg.classes + 1) + linear_flops(qrows, d, 4);
  return total;
}

#define MSDETR_INSTANTIATE_MODEL(T) \
  template struct BackboneBlock<T>; \
  template struct ModelT<T>;        \
  template ModelT<T> build<T>(const ModelConfig&); \
  template ModelT<T> fuse_model<T>(const ModelT<T>&);

MSDETR_INSTANTIATE_MODEL(double)
MSDETR_INSTANTIATE_MODEL(float)
#undef MSDETR_INSTANTIATE_MODEL

}  // namespace msdetr
