#pragma once

#include "dcd/model.hpp"

#include <functional>

namespace dcd {

// Autoregressive inference. Every strategy is greedy argmax over a per-step
// logit vector (ties to the lowest token id); the contrastive strategies
// combine two logit streams that always condition on the identical shared
// prefix. No KV cache: each step recomputes the full prefix.

enum class DecodeStrategy { Greedy, Vcd, Dcd, OtherImage };
enum class PosPathSource { SftProj, TrainedPosProj };
enum class TieBreak { LowestTokenId };

std::string to_string(DecodeStrategy s);
DecodeStrategy strategy_from_string(const std::string& s);

struct DecodeConfig {
  DecodeStrategy strategy = DecodeStrategy::Greedy;
  Scalar alpha = 1.0;  // suppression strength of the negative stream
  Scalar sigma = 0.5;  // noise std for VCD image distortion
  int max_length = 16;
  int eos_id = 1;
  TieBreak tie_break = TieBreak::LowestTokenId;
  PosPathSource pos_source = PosPathSource::SftProj;
  // Seeded temperature sampling exists behind this flag; the tested
  // surface is greedy argmax.
  bool sample_with_temperature = false;
  Scalar temperature = 1.0;

  void validate() const;
};

// (1 + alpha) * logit_w - alpha * logit_l, elementwise.
Mat contrastive_combine(const Mat& logit_w, const Mat& logit_l, Scalar alpha);

// Argmax with ties broken toward the lowest token id.
int argmax_token(const Mat& logits);

using LogitStream = std::function<Mat(const TokenSequence& y_prefix)>;

// Single-stream decode loop.
TokenSequence decode_stream(const LogitStream& stream, const DecodeConfig& config,
                            Rng* rng = nullptr);

// Two-stream decode loop; the shared prefix is owned by the loop and handed
// to both streams each step.
TokenSequence decode_contrastive_streams(const LogitStream& stream_w, const LogitStream& stream_l,
                                         const DecodeConfig& config, Rng* rng = nullptr);

// v' = v + Gaussian(0, sigma^2) noise per coordinate; sigma = 0 returns v
// bit-identically.
Mat perturb_image(const Mat& v, Scalar sigma, Rng& rng);

TokenSequence greedy_decode(const ModelParams& params, const VisualProjection& proj,
                            const TokenSequence& x, const Mat& v, const DecodeConfig& config);

// Negative stream conditions on one noise-distorted image drawn per
// response.
TokenSequence decode_vcd(const ModelParams& params, const VisualProjection& proj,
                         const TokenSequence& x, const Mat& v, const DecodeConfig& config,
                         Rng& rng);

// Negative stream conditions on the negative projection of the same image;
// pair.positive must already be the configured positive path.
TokenSequence decode_dcd(const ModelParams& params, const ProjectionPair& pair,
                         const TokenSequence& x, const Mat& v, const DecodeConfig& config);

// Negative stream conditions on a different image through the same
// projection.
TokenSequence decode_other_image(const ModelParams& params, const VisualProjection& proj,
                                 const TokenSequence& x, const Mat& v, const Mat& v_other,
                                 const DecodeConfig& config);

}  // namespace dcd
