#pragma once

#include "dcd/decoding.hpp"
#include "dcd/training.hpp"
#include "dcd/world.hpp"

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace dcd {

// Scene-oracle evaluation: hallucination rate on DESCRIBE prompts,
// existence accuracy/F1 on balanced object probes, exact-match accuracy on
// the general split, and the likelihood-displacement readout of a training
// trace. Judged-quality scores have no oracle analogue here; every metric is
// recomputable from raw decoded tokens.

enum class ProbeRegime { Random, Popular, Adversarial };
std::string to_string(ProbeRegime r);

struct Probe {
  Mat v;            // image feature of the probed scene
  Scene scene;      // oracle
  int object_index; // probed object
  bool present;     // ground truth
};

struct ProbeSet {
  ProbeRegime regime = ProbeRegime::Random;
  std::vector<Probe> probes;  // balanced: even indices present, odd absent
};

// Absent-object rule per regime: Random draws uniformly, Popular takes the
// highest-popularity absent object, Adversarial the absent object with
// maximal summed co-occurrence with the present set. `count` is rounded
// down to an even number so present/absent stay balanced 50/50.
ProbeSet build_probe_set(const std::vector<PreferenceSample>& pool, ProbeRegime regime,
                         int count, Rng rng);

// A decoder maps (prompt, image, sample id) to a token sequence. The id
// keys per-sample noise streams so stochastic strategies stay reproducible.
using Decoder = std::function<TokenSequence(const TokenSequence& x, const Mat& v, uint64_t id)>;

struct HallucinationResult {
  double rate = 0;    // fraction of responses naming >= 1 absent object
  double recall = 0;  // mean fraction of present objects mentioned (omissions metric)
  int malformed = 0;  // no object tokens and no EOS; counted non-hallucinated
  int total = 0;
};
HallucinationResult hallucination_rate(const Decoder& decode,
                                       const std::vector<PreferenceSample>& describe_set,
                                       const Vocab& vocab, int threads = 1);

struct ConfusionMatrix {
  int64_t tp = 0, fp = 0, tn = 0, fn = 0;
  double accuracy() const;
  double precision() const;
  double recall() const;
  double f1() const;  // "yes" is the positive class
};

struct ExistenceResult {
  ConfusionMatrix cm;
  double accuracy = 0;
  double f1 = 0;
  int malformed = 0;  // first content token neither yes nor no; scored as
                      // the wrong class
  int total = 0;
};
ExistenceResult existence_accuracy(const Decoder& decode, const ProbeSet& probes,
                                   const Vocab& vocab, int threads = 1);

struct GeneralResult {
  double accuracy = 0;  // exact match against the scene-oracle answer
  int malformed = 0;    // no digit tokens before EOS; still incorrect
  int total = 0;
};
GeneralResult general_accuracy(const Decoder& decode,
                               const std::vector<PreferenceSample>& general_set,
                               const World& world, int threads = 1);

struct DisplacementResult {
  bool displaced = false;
  Scalar dlogp_w = 0, dlogp_l = 0, dmargin = 0;
};
// displaced = final logp_w below its step-0 value while the margin grew.
DisplacementResult likelihood_displacement_trace(const TrainTrace& trace);

// --- cross-method comparison ---

struct EvalConfig {
  std::vector<std::string> methods;  // of kKnownMethods
  int probes_per_regime = 120;
  Scalar alpha = 1.0;
  Scalar sigma = 0.5;
  int max_length = 16;
  PosPathSource pos_source = PosPathSource::SftProj;
  uint64_t seed = 0;
  int threads = 1;
};

extern const std::vector<std::string> kKnownMethods;

struct EvalInputs {
  const Dataset* dataset = nullptr;
  // Stage checkpoints; a method whose checkpoint is missing is rejected.
  const Checkpoint* sft = nullptr;
  const Checkpoint* dpo = nullptr;
  const Checkpoint* dcd_neg = nullptr;
  const Checkpoint* dcd_pos = nullptr;
  const Checkpoint* dcd_both = nullptr;
};

struct MethodReport {
  std::string name;
  HallucinationResult hall;
  std::array<ExistenceResult, 3> exist;  // Random, Popular, Adversarial
  GeneralResult general;
  // Mean held-out sequence log-likelihoods under the method's scoring model
  // (its parameters and positive-path projection) on the validation split.
  Scalar mean_logp_w = 0, mean_logp_l = 0;
};

struct EvalReport {
  std::vector<MethodReport> methods;
  uint64_t seed = 0;
  uint64_t dataset_hash = 0;
  std::string to_json() const;
  std::string to_table() const;
  static EvalReport from_json(const std::string& text);
};

// Runs every requested method on identical splits, probe sets and seeds.
// Model weights are checksummed before and after; evaluation must not
// mutate them.
EvalReport compare_methods(const EvalInputs& inputs, const EvalConfig& config);

// Builds the decoder a method name denotes, using the same wiring as
// compare_methods.
Decoder make_method_decoder(const std::string& method, const EvalInputs& inputs,
                            const EvalConfig& config);

// Line-delimited decode export: {id, strategy, alpha, tokens, text}.
void export_decodes(const std::string& path, const std::string& strategy, Scalar alpha,
                    const Decoder& decode, const std::vector<PreferenceSample>& samples,
                    const Vocab& vocab);

}  // namespace dcd
