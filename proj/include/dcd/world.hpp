#pragma once

#include "dcd/tensor.hpp"

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace dcd {

// Synthetic vision-language universe. Scenes are sets of objects from a
// fixed catalog; an "image" is a linear encoding of the scene's multi-hot
// vector plus Gaussian noise. Questions and answers live in a closed
// template language over a small vocabulary.

enum class TaskKind { Describe, Exist, Count };
enum class HallucinationPolicy { Random, Popular, Cooccur };

std::string to_string(TaskKind t);
TaskKind task_from_string(const std::string& s);
std::string to_string(HallucinationPolicy p);
HallucinationPolicy policy_from_string(const std::string& s);

// Token layout: [bos eos pad sep | objects | yes no | digits 0-9 | question markers].
struct Vocab {
  int n_objects = 12;

  static constexpr int bos = 0, eos = 1, pad = 2, sep = 3;
  int object(int i) const { return 4 + i; }
  bool is_object(int id) const { return id >= 4 && id < 4 + n_objects; }
  int object_index(int id) const { return id - 4; }
  int yes() const { return 4 + n_objects; }
  int no() const { return 5 + n_objects; }
  int digit(int k) const { return 6 + n_objects + k; }
  bool is_digit(int id) const { return id >= digit(0) && id <= digit(9); }
  int digit_value(int id) const { return id - digit(0); }
  int q_describe() const { return 16 + n_objects; }
  int q_exist() const { return 17 + n_objects; }
  int q_count() const { return 18 + n_objects; }
  int size() const { return 19 + n_objects; }

  TokenSequence digits_of(int value) const;  // value >= 0
  std::string token_name(int id) const;
};

std::string detokenize(const Vocab& vocab, const TokenSequence& tokens);

// Catalog-level structure shared by every scene: object popularity (Zipf)
// and a seeded symmetric co-occurrence affinity.
struct Catalog {
  int n_objects = 0;
  std::vector<Scalar> popularity;  // positive, sums to 1
  Mat cooccurrence;                // n x n symmetric, zero diagonal
  static Catalog make(int n_objects, Rng rng);
};

struct Scene {
  std::vector<int> present;  // sorted object indices
  std::shared_ptr<const Catalog> catalog;

  bool contains(int obj) const;
  std::vector<int> absent() const;
  const std::vector<Scalar>& popularity() const { return catalog->popularity; }
  const Mat& cooccurrence() const { return catalog->cooccurrence; }
};

// k distinct objects drawn by popularity weight without replacement.
Scene generate_scene(std::shared_ptr<const Catalog> catalog, Rng& rng, int k);

struct WorldConfig {
  int n_objects = 12;
  int d_image = 16;
  Scalar noise_std = 0.05;
  int k_min = 2, k_max = 6;
  HallucinationPolicy policy = HallucinationPolicy::Cooccur;
  int train_size = 1000, val_size = 200, eval_hall_size = 200, eval_general_size = 200;
  Scalar mix_describe = 0.4, mix_exist = 0.4, mix_count = 0.2;
  void validate() const;
};

struct World {
  WorldConfig config;
  Vocab vocab;
  std::shared_ptr<const Catalog> catalog;
  Mat w_enc;  // n_objects x d_image

  static World make(const WorldConfig& config, uint64_t seed);
};

// v = multihot(scene) * W_enc + noise.
Mat render_features(const Scene& scene, const Mat& w_enc, Scalar noise_std, Rng& rng);

struct PreferenceSample {
  int64_t id = 0;
  TaskKind task = TaskKind::Describe;
  TokenSequence x;    // question, starts with BOS
  Mat v;              // 1 x d_image
  TokenSequence y_w;  // faithful response, ends with EOS
  TokenSequence y_l;  // response with exactly one injected violation
  Scene scene;        // evaluation oracle only; never shown to the model
};

// Narrow view handed to training and decoding code: no scene access.
struct TrainingView {
  const TokenSequence* x;
  const Mat* v;
  const TokenSequence* y_w;
  const TokenSequence* y_l;
};
TrainingView view(const PreferenceSample& s);
std::vector<TrainingView> views(const std::vector<PreferenceSample>& samples);

TokenSequence describe_prompt(const Vocab& vocab);
TokenSequence exist_prompt(const Vocab& vocab, int object_index);
TokenSequence count_prompt(const Vocab& vocab);

// The faithful answer to prompt x about `scene` (EXIST probes parse the
// object out of x).
TokenSequence oracle_response(const World& world, const Scene& scene, const TokenSequence& x);

// Object indices mentioned in a response (anything before EOS).
std::vector<int> objects_in_response(const Vocab& vocab, const TokenSequence& y);

// Picks an absent object to inject: Random = uniform over absent, Popular =
// popularity-weighted, Cooccur = weighted by summed co-occurrence with the
// present set.
int draw_hallucinated_object(const Scene& scene, HallucinationPolicy policy, Rng& rng);

PreferenceSample make_preference_sample(const World& world, const Scene& scene, TaskKind task,
                                        Rng& rng, int64_t id);

struct Dataset {
  World world;
  uint64_t seed = 0;
  std::vector<PreferenceSample> train, val, eval_hall, eval_general;
};

// Pure function of (config, seed): disjoint-by-scene splits, eval_hall all
// DESCRIBE, eval_general all COUNT on unseen scenes.
Dataset build_dataset(const WorldConfig& config, uint64_t seed);

// JSONL per split plus manifest.json (config, seed, counts, content hash).
void save_dataset(const std::string& dir, const Dataset& dataset);
Dataset load_dataset(const std::string& dir);
uint64_t dataset_content_hash(const std::string& dir);

}  // namespace dcd
