// Copyright (c) 2026 PatchPool Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>

#include "patchpool/model.hpp"

namespace patchpool {

// Flat binary checkpoint ("PCNV1"): magic line, length-prefixed UTF-8
// config as key=value lines, then every registry tensor (including batch
// norm buffers) as (u32 name length, name, u32 rank, u64 dims,
// little-endian float64 payload). Round-trips byte exactly.

std::string serialize_config(const ModelConfig& config);
ModelConfig deserialize_config(const std::string& text);

void save_checkpoint(const PatchConvNet& model, const std::string& path);
PatchConvNet load_checkpoint(const std::string& path);

}  // namespace patchpool
