// SPDX-License-Identifier: Apache-2.0
//
// Encoder + backbone + readout for one view.

#pragma once

#include <cstdint>
#include <string>

#include "ccmd/backbone.hpp"
#include "ccmd/encoder.hpp"
#include "json.hpp"

namespace ccmd {

enum class Arch { Transformer, Gin };

const char* to_string(Arch a);
Arch arch_from_string(const std::string& s);

struct ModelConfig {
  Arch arch = Arch::Transformer;
  enc::View view = enc::View::TwoD;
  int width = 64;
  int layers = 4;
  int heads = 4;
  int ffn = 256;
  double gin_eps = 0.0;
  /// Attention bias from bonds (2D) or RBF distances (3D); transformer only.
  bool attention_bias = true;
  /// Width of a trace projection used when distilling into a different width;
  /// 0 disables it. Initialised to the (rectangular) identity.
  int projection_width = 0;
  enc::EncoderConfig encoder;

  net::TransformerConfig transformer() const;
  net::GinConfig gin() const;
  enc::EncoderConfig encoder_config() const;
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&);
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

ParamStore init_model(const ModelConfig& cfg, std::uint64_t seed);

net::BackboneOutput model_forward(const ModelConfig& cfg, ParamBinding& params,
                                  const mol::GraphBatch& batch,
                                  const net::LayerHook& hook = {});

/// Applies the identity-initialised projection to every layer of a trace,
/// or returns the trace unchanged when the model has none.
net::LayerTrace project_trace(const ModelConfig& cfg, ParamBinding& params,
                              const net::LayerTrace& trace);

}  // namespace ccmd
