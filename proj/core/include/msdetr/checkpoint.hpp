// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>

#include "msdetr/model.hpp"

namespace msdetr {

/// Container format "MSDK1": 5-byte magic, u64 little-endian manifest length,
/// JSON manifest (config + tensor directory with name/shape/dtype/offset),
/// then raw little-endian float64 payloads. Same-name saves are byte-stable.
inline constexpr char kCheckpointMagic[] = "MSDK1";

template <typename T>
void save_checkpoint(const std::string& path, ModelT<T>& model);

/// Rebuilds the model recorded at `path`. The stored dtype converts to T on
/// load; fused checkpoints restore fused blocks.
template <typename T>
ModelT<T> load_checkpoint(const std::string& path);

/// Reads only the config block of a checkpoint.
ModelConfig peek_checkpoint_config(const std::string& path);

extern template void save_checkpoint<double>(const std::string&, ModelT<double>&);
extern template void save_checkpoint<float>(const std::string&, ModelT<float>&);
extern template ModelT<double> load_checkpoint<double>(const std::string&);
extern template ModelT<float> load_checkpoint<float>(const std::string&);

}  // namespace msdetr
