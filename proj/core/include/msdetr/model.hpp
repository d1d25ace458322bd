// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>

#include "msdetr/decoder.hpp"
#include "msdetr/fusion.hpp"
#include "msdetr/reparam.hpp"

namespace msdetr {

/// Full pipeline configuration, including the three ablation toggles of the
/// component lattice: re-parameterizable backbone blocks (rep), deformable
/// attention encoder (da), and the bidirectional fusion neck (csff).
struct ModelConfig {
  int64_t levels = 3;
  int64_t d_model = 64;
  int64_t encoder_layers = 2;
  int64_t decoder_layers = 2;
  int64_t heads = 4;
  int64_t points = 4;
  int64_t queries = 30;
  int64_t classes = 5;
  bool rep = true;
  bool da = true;
  bool csff = true;
  std::vector<int64_t> backbone_widths = {32, 64, 64, 64};  // stem + one per level
  std::vector<int64_t> backbone_blocks = {1, 1, 1};         // blocks per stage
  int64_t ffn_mult = 4;
  int64_t vov_depth = 2;
  bool aux_loss = false;
  uint64_t init_seed = 7;

  void validate() const;  // throws ConfigError naming the offending field

  /// Shrunk configuration sized for CPU training.
  static ModelConfig desk_default();
  /// Paper-scale shape (d=256, 8 heads, K=4, L=4, N_q=300, 6+6 layers) for
  /// shape-only smoke tests.
  static ModelConfig full_scale();
};

/// One backbone unit: a re-parameterizable block, its fused form, or a plain
/// conv-BN-SiLU block, depending on configuration and fusion state.
template <typename T>
struct BackboneBlock {
  bool is_rep = false;
  bool use_fused = false;
  RepBlock<T> rep;
  FusedBlock<T> fused;
  ConvBnAct<T> plain;

  TensorT<T> forward(const TensorT<T>& x, bool training);
};

template <typename T>
struct ParamRef {
  std::string name;
  TensorT<T>* tensor;
};

template <typename T>
struct BufferRef {
  std::string name;
  std::vector<T>* buffer;
};

template <typename T>
struct ModelT {
  ModelConfig cfg;
  ConvBnAct<T> stem;
  std::vector<std::vector<BackboneBlock<T>>> stages;
  std::vector<ConvBnAct<T>> laterals;
  std::vector<EncoderLayerT<T>> encoder;
  std::vector<std::vector<ConvBnAct<T>>> refine;  // conv refinement when !da
  FuseNeck<T> neck;                               // csff=false uses only neck.td
  QuerySetT<T> queries;
  std::vector<DecoderLayerT<T>> decoder;
  PredictHeads<T> heads;

  /// Hierarchical feature maps after lateral projection to d channels.
  MultiScaleFeaturesT<T> backbone_forward(const TensorT<T>& image, bool training);
  /// Fused pyramid as consumed by the decoder.
  MultiScaleFeaturesT<T> encode(const TensorT<T>& image, bool training);
  /// Final detections; rows are batch-major (item b owns rows [b*Nq,(b+1)*Nq)).
  DetectionsT<T> forward(const TensorT<T>& image, bool training = false);
  /// Detections from every decoder layer, for auxiliary losses.
  std::vector<DetectionsT<T>> forward_all_layers(const TensorT<T>& image, bool training);

  /// Named learnable tensors in deterministic order.
  std::vector<ParamRef<T>> params();
  /// Named non-learnable state (BN running statistics).
  std::vector<BufferRef<T>> buffers();
  int64_t param_count();

  /// Analytic FLOPs of one forward pass at the given input size.
  int64_t flops(int64_t height, int64_t width) const;
};

using Model = ModelT<double>;

/// Builds the model per configuration; throws ConfigError on violations.
template <typename T>
ModelT<T> build(const ModelConfig& cfg);

/// Replaces every re-parameterizable block by its fused single-convolution
/// form; all other parameters are shared with the input model.
template <typename T>
ModelT<T> fuse_model(const ModelT<T>& model);

#define MSDETR_EXTERN_MODEL(T)                     \
  extern template struct BackboneBlock<T>;         \
  extern template struct ModelT<T>;                \
  extern template ModelT<T> build<T>(const ModelConfig&); \
  extern template ModelT<T> fuse_model<T>(const ModelT<T>&);

MSDETR_EXTERN_MODEL(double)
MSDETR_EXTERN_MODEL(float)
#undef MSDETR_EXTERN_MODEL

}  // namespace msdetr
