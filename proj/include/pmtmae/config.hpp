// SPDX-License-Identifier: Apache-2.0
#pragma once

// Flat dotted-key run configuration. Every key has a typed default; files and
// overrides may only set known keys, and later sources win.

#include <json.hpp>

#include <string>

#include "pmtmae/data.hpp"
#include "pmtmae/distill.hpp"
#include "pmtmae/model.hpp"
#include "pmtmae/train.hpp"

namespace pmt {

using FlatConfig = nlohmann::ordered_json;

FlatConfig default_config();

// Overlays `src` onto `base`. Unknown keys and type mismatches raise Config
// errors naming the key. Integers are accepted where reals are expected.
void merge_config(FlatConfig& base, const FlatConfig& src, const std::string& origin);

// default_config() <- file (if non-empty) <- overrides.
FlatConfig resolve_config(const std::string& file, const FlatConfig& overrides);

enum class Stage { Pretrain, Finetune };

ModelConfig model_config(const FlatConfig& cfg);
DistillConfig distill_config(const FlatConfig& cfg);
TrainConfig train_config(const FlatConfig& cfg, Stage stage);
SyntheticSpec synthetic_spec(const FlatConfig& cfg);
SynthTeacherConfig teacher_config(const FlatConfig& cfg, const ModelConfig& student);

// Writes the model.* keys of `m` into `cfg`.
void store_model_config(FlatConfig& cfg, const ModelConfig& m);

}  // namespace pmt
