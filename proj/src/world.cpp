#include "dcd/world.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace dcd {

using nlohmann::json;
namespace fs = std::filesystem;

std::string to_string(TaskKind t) {
  switch (t) {
    case TaskKind::Describe: return "DESCRIBE";
    case TaskKind::Exist: return "EXIST";
    case TaskKind::Count: return "COUNT";
  }
  return "?";
}

TaskKind task_from_string(const std::string& s) {
  if (s == "DESCRIBE") return TaskKind::Describe;
  if (s == "EXIST") return TaskKind::Exist;
  if (s == "COUNT") return TaskKind::Count;
  throw std::invalid_argument("unknown task kind: " + s);
}

std::string to_string(HallucinationPolicy p) {
  switch (p) {
    case HallucinationPolicy::Random: return "random";
    case HallucinationPolicy::Popular: return "popular";
    case HallucinationPolicy::Cooccur: return "cooccur";
  }
  return "?";
}

HallucinationPolicy policy_from_string(const std::string& s) {
  if (s == "random") return HallucinationPolicy::Random;
  if (s == "popular") return HallucinationPolicy::Popular;
  if (s == "cooccur") return HallucinationPolicy::Cooccur;
  throw std::invalid_argument("unknown hallucination policy: " + s);
}

TokenSequence Vocab::digits_of(int value) const {
  if (value < 0) throw std::invalid_argument("digits_of: negative value");
  std::string s = std::to_string(value);
  TokenSequence out;
  for (char c : s) out.push_back(digit(c - '0'));
  return out;
}

std::string Vocab::token_name(int id) const {
  if (id == bos) return "<bos>";
  if (id == eos) return "<eos>";
  if (id == pad) return "<pad>";
  if (id == sep) return "<sep>";
  if (is_object(id)) return "obj" + std::to_string(object_index(id));
  if (id == yes()) return "yes";
  if (id == no()) return "no";
  if (is_digit(id)) return std::to_string(digit_value(id));
  if (id == q_describe()) return "<describe>";
  if (id == q_exist()) return "<exist>";
  if (id == q_count()) return "<count>";
  return "<tok" + std::to_string(id) + ">";
}

std::string detokenize(const Vocab& vocab, const TokenSequence& tokens) {
  std::string out;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0) out += ' ';
    out += vocab.token_name(tokens[i]);
  }
  return out;
}

Catalog Catalog::make(int n_objects, Rng rng) {
  if (n_objects < 2) throw std::invalid_argument("Catalog: need at least 2 objects");
  Catalog c;
  c.n_objects = n_objects;
  // Zipf popularity, then normalize.
  Scalar total = 0;
  c.popularity.resize(n_objects);
  for (int i = 0; i < n_objects; ++i) {
    c.popularity[i] = 1.0 / static_cast<Scalar>(i + 1);
    total += c.popularity[i];
  }
  for (Scalar& w : c.popularity) w /= total;
  c.cooccurrence = Mat::Zero(n_objects, n_objects);
  for (int i = 0; i < n_objects; ++i) {
    for (int j = i + 1; j < n_objects; ++j) {
      const Scalar w = 0.05 + 0.95 * rng.uniform();
      c.cooccurrence(i, j) = w;
      c.cooccurrence(j, i) = w;
    }
  }
  return c;
}

bool Scene::contains(int obj) const {
  return std::binary_search(present.begin(), present.end(), obj);
}

std::vector<int> Scene::absent() const {
  std::vector<int> out;
  for (int i = 0; i < catalog->n_objects; ++i) {
    if (!contains(i)) out.push_back(i);
  }
  return out;
}

Scene generate_scene(std::shared_ptr<const Catalog> catalog, Rng& rng, int k) {
  const int n = catalog->n_objects;
  if (k < 1 || k > n) {
    throw std::invalid_argument("generate_scene: k=" + std::to_string(k) +
                                " outside [1, " + std::to_string(n) + "]");
  }
  std::vector<Scalar> weights = catalog->popularity;
  Scene scene;
  scene.catalog = std::move(catalog);
  for (int draw = 0; draw < k; ++draw) {
    const int idx = rng.weighted_index(weights);
    scene.present.push_back(idx);
    weights[idx] = 0.0;
  }
  std::sort(scene.present.begin(), scene.present.end());
  return scene;
}

void WorldConfig::validate() const {
  if (n_objects < 2 || n_objects > 12) {
    throw std::invalid_argument("WorldConfig: n_objects must be in [2, 12]");
  }
  if (d_image <= 0) throw std::invalid_argument("WorldConfig: d_image must be positive");
  if (noise_std < 0) throw std::invalid_argument("WorldConfig: noise_std must be >= 0");
  if (k_min < 1 || k_max < k_min || k_max > n_objects - 1) {
    // Every scene must keep at least one absent object so negatives and
    // existence probes are constructible.
    throw std::invalid_argument("WorldConfig: need 1 <= k_min <= k_max <= n_objects - 1");
  }
  if (train_size <= 0 || val_size <= 0 || eval_hall_size <= 0 || eval_general_size <= 0) {
    throw std::invalid_argument("WorldConfig: split sizes must be positive");
  }
  if (mix_describe < 0 || mix_exist < 0 || mix_count < 0 ||
      mix_describe + mix_exist + mix_count <= 0) {
    throw std::invalid_argument("WorldConfig: task mix weights must be >= 0 with positive sum");
  }
}

World World::make(const WorldConfig& config, uint64_t seed) {
  config.validate();
  World w;
  w.config = config;
  w.vocab.n_objects = config.n_objects;
  Rng root(seed);
  Rng cat_rng = root.derive("catalog");
  w.catalog = std::make_shared<Catalog>(Catalog::make(config.n_objects, cat_rng));
  Rng enc_rng = root.derive("encoder");
  w.w_enc = gaussian_matrix(config.n_objects, config.d_image, 1.0, enc_rng);
  return w;
}

Mat render_features(const Scene& scene, const Mat& w_enc, Scalar noise_std, Rng& rng) {
  Mat multihot = Mat::Zero(1, w_enc.rows());
  for (int obj : scene.present) multihot(0, obj) = 1.0;
  Mat v = multihot * w_enc;
  if (noise_std > 0) {
    for (Index j = 0; j < v.cols(); ++j) v(0, j) += noise_std * rng.gaussian();
  }
  return v;
}

TrainingView view(const PreferenceSample& s) { return TrainingView{&s.x, &s.v, &s.y_w, &s.y_l}; }

std::vector<TrainingView> views(const std::vector<PreferenceSample>& samples) {
  std::vector<TrainingView> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(view(s));
  return out;
}

TokenSequence describe_prompt(const Vocab& vocab) {
  return {Vocab::bos, vocab.q_describe(), Vocab::sep};
}

TokenSequence exist_prompt(const Vocab& vocab, int object_index) {
  return {Vocab::bos, vocab.q_exist(), vocab.object(object_index), Vocab::sep};
}

TokenSequence count_prompt(const Vocab& vocab) {
  return {Vocab::bos, vocab.q_count(), Vocab::sep};
}

TokenSequence oracle_response(const World& world, const Scene& scene, const TokenSequence& x) {
  const Vocab& vocab = world.vocab;
  if (x.size() < 3 || x[0] != Vocab::bos) {
    throw std::invalid_argument("oracle_response: malformed prompt");
  }
  TokenSequence y;
  if (x[1] == vocab.q_describe()) {
    for (int obj : scene.present) y.push_back(vocab.object(obj));
  } else if (x[1] == vocab.q_exist()) {
    if (!vocab.is_object(x[2])) {
      throw std::invalid_argument("oracle_response: EXIST prompt names no object");
    }
    y.push_back(scene.contains(vocab.object_index(x[2])) ? vocab.yes() : vocab.no());
  } else if (x[1] == vocab.q_count()) {
    TokenSequence digits = vocab.digits_of(static_cast<int>(scene.present.size()));
    y.insert(y.end(), digits.begin(), digits.end());
  } else {
    throw std::invalid_argument("oracle_response: unknown question token " +
                                vocab.token_name(x[1]));
  }
  y.push_back(Vocab::eos);
  return y;
}

std::vector<int> objects_in_response(const Vocab& vocab, const TokenSequence& y) {
  std::vector<int> out;
  for (int id : y) {
    if (id == Vocab::eos) break;
    if (vocab.is_object(id)) out.push_back(vocab.object_index(id));
  }
  return out;
}

int draw_hallucinated_object(const Scene& scene, HallucinationPolicy policy, Rng& rng) {
  const std::vector<int> absent = scene.absent();
  if (absent.empty()) {
    throw std::invalid_argument("draw_hallucinated_object: scene has no absent objects");
  }
  std::vector<Scalar> weights(absent.size(), 1.0);
  if (policy == HallucinationPolicy::Popular) {
    for (size_t i = 0; i < absent.size(); ++i) weights[i] = scene.popularity()[absent[i]];
  } else if (policy == HallucinationPolicy::Cooccur) {
    for (size_t i = 0; i < absent.size(); ++i) {
      Scalar w = 0;
      for (int p : scene.present) w += scene.cooccurrence()(p, absent[i]);
      weights[i] = w;
    }
  }
  return absent[static_cast<size_t>(rng.weighted_index(weights))];
}

PreferenceSample make_preference_sample(const World& world, const Scene& scene, TaskKind task,
                                        Rng& rng, int64_t id) {
  const Vocab& vocab = world.vocab;
  PreferenceSample s;
  s.id = id;
  s.task = task;
  s.scene = scene;
  switch (task) {
    case TaskKind::Describe: {
      s.x = describe_prompt(vocab);
      s.y_w = oracle_response(world, scene, s.x);
      // Inject one absent object at its sorted position: a plausible but
      // wrong object list.
      const int bad = draw_hallucinated_object(scene, world.config.policy, rng);
      s.y_l = s.y_w;
      auto at = s.y_l.begin();
      while (at != s.y_l.end() && vocab.is_object(*at) &&
             vocab.object_index(*at) < bad) {
        ++at;
      }
      s.y_l.insert(at, vocab.object(bad));
      break;
    }
    case TaskKind::Exist: {
      // Probe a present or absent object with equal probability.
      const bool probe_present = rng.uniform() < 0.5;
      int obj;
      if (probe_present) {
        obj = scene.present[static_cast<size_t>(rng.uniform_int(
            static_cast<int>(scene.present.size())))];
      } else {
        const auto absent = scene.absent();
        obj = absent[static_cast<size_t>(rng.uniform_int(static_cast<int>(absent.size())))];
      }
      s.x = exist_prompt(vocab, obj);
      s.y_w = oracle_response(world, scene, s.x);
      s.y_l = {s.y_w[0] == vocab.yes() ? vocab.no() : vocab.yes(), Vocab::eos};
      break;
    }
    case TaskKind::Count: {
      s.x = count_prompt(vocab);
      s.y_w = oracle_response(world, scene, s.x);
      const int truth = static_cast<int>(scene.present.size());
      int wrong = truth + (rng.uniform() < 0.5 ? 1 : -1);
      if (wrong < 0) wrong = 0;
      s.y_l = vocab.digits_of(wrong);
      s.y_l.push_back(Vocab::eos);
      break;
    }
  }
  Rng feature_rng = rng.derive("features");
  s.v = render_features(scene, world.w_enc, world.config.noise_std, feature_rng);
  return s;
}

namespace {

TaskKind draw_task(const WorldConfig& config, Rng& rng) {
  const int idx =
      rng.weighted_index({config.mix_describe, config.mix_exist, config.mix_count});
  return idx == 0 ? TaskKind::Describe : (idx == 1 ? TaskKind::Exist : TaskKind::Count);
}

}  // namespace

Dataset build_dataset(const WorldConfig& config, uint64_t seed) {
  config.validate();
  Dataset d;
  d.world = World::make(config, seed);
  d.seed = seed;
  Rng root(seed);
  Rng scene_root = root.derive("scene");
  Rng sample_root = root.derive("sample");
  Rng task_root = root.derive("task");

  int64_t next_id = 0;
  auto generate = [&](std::vector<PreferenceSample>& out, int count, auto pick_task) {
    out.reserve(count);
    for (int i = 0; i < count; ++i, ++next_id) {
      Rng scene_rng = scene_root.derive(static_cast<uint64_t>(next_id));
      const int span = config.k_max - config.k_min + 1;
      const int k = config.k_min + scene_rng.uniform_int(span);
      Scene scene = generate_scene(d.world.catalog, scene_rng, k);
      Rng sample_rng = sample_root.derive(static_cast<uint64_t>(next_id));
      out.push_back(
          make_preference_sample(d.world, scene, pick_task(next_id), sample_rng, next_id));
    }
  };

  auto mixed = [&](int64_t id) {
    Rng t = task_root.derive(static_cast<uint64_t>(id));
    return draw_task(config, t);
  };
  generate(d.train, config.train_size, mixed);
  generate(d.val, config.val_size, mixed);
  generate(d.eval_hall, config.eval_hall_size, [](int64_t) { return TaskKind::Describe; });
  generate(d.eval_general, config.eval_general_size, [](int64_t) { return TaskKind::Count; });
  return d;
}

// --- serialization ---

namespace {

json config_to_json(const WorldConfig& c) {
  return json{{"n_objects", c.n_objects},
              {"d_image", c.d_image},
              {"noise_std", c.noise_std},
              {"k_min", c.k_min},
              {"k_max", c.k_max},
              {"hallucination_policy", to_string(c.policy)},
              {"train_size", c.train_size},
              {"val_size", c.val_size},
              {"eval_hall_size", c.eval_hall_size},
              {"eval_general_size", c.eval_general_size},
              {"mix_describe", c.mix_describe},
              {"mix_exist", c.mix_exist},
              {"mix_count", c.mix_count}};
}

WorldConfig config_from_json(const json& j) {
  WorldConfig c;
  c.n_objects = j.at("n_objects").get<int>();
  c.d_image = j.at("d_image").get<int>();
  c.noise_std = j.at("noise_std").get<Scalar>();
  c.k_min = j.at("k_min").get<int>();
  c.k_max = j.at("k_max").get<int>();
  c.policy = policy_from_string(j.at("hallucination_policy").get<std::string>());
  c.train_size = j.at("train_size").get<int>();
  c.val_size = j.at("val_size").get<int>();
  c.eval_hall_size = j.at("eval_hall_size").get<int>();
  c.eval_general_size = j.at("eval_general_size").get<int>();
  c.mix_describe = j.at("mix_describe").get<Scalar>();
  c.mix_exist = j.at("mix_exist").get<Scalar>();
  c.mix_count = j.at("mix_count").get<Scalar>();
  return c;
}

json sample_to_json(const PreferenceSample& s) {
  std::vector<Scalar> v(s.v.data(), s.v.data() + s.v.size());
  return json{{"id", s.id},          {"task", to_string(s.task)},
              {"x", s.x},            {"v", v},
              {"y_w", s.y_w},        {"y_l", s.y_l},
              {"scene", json{{"present", s.scene.present}}}};
}

PreferenceSample sample_from_json(const json& j, const World& world) {
  PreferenceSample s;
  s.id = j.at("id").get<int64_t>();
  s.task = task_from_string(j.at("task").get<std::string>());
  s.x = j.at("x").get<TokenSequence>();
  const auto v = j.at("v").get<std::vector<Scalar>>();
  s.v = Mat(1, static_cast<Index>(v.size()));
  for (size_t i = 0; i < v.size(); ++i) s.v(0, static_cast<Index>(i)) = v[i];
  s.y_w = j.at("y_w").get<TokenSequence>();
  s.y_l = j.at("y_l").get<TokenSequence>();
  s.scene.present = j.at("scene").at("present").get<std::vector<int>>();
  s.scene.catalog = world.catalog;
  return s;
}

const char* split_file(int i) {
  static const char* kNames[] = {"train.jsonl", "val.jsonl", "eval_hall.jsonl",
                                 "eval_general.jsonl"};
  return kNames[i];
}

void write_split(const fs::path& path, const std::vector<PreferenceSample>& samples) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("save_dataset: cannot open " + path.string());
  for (const auto& s : samples) os << sample_to_json(s).dump() << '\n';
}

std::vector<PreferenceSample> read_split(const fs::path& path, const World& world) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("load_dataset: cannot open " + path.string());
  std::vector<PreferenceSample> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    out.push_back(sample_from_json(json::parse(line), world));
  }
  return out;
}

uint64_t hash_file(const fs::path& path, uint64_t h) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("dataset hash: cannot open " + path.string());
  char buf[65536];
  while (is) {
    is.read(buf, sizeof buf);
    h = fnv1a64(buf, static_cast<size_t>(is.gcount()), h);
  }
  return h;
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

uint64_t dataset_content_hash(const std::string& dir) {
  uint64_t h = 1469598103934665603ULL;
  for (int i = 0; i < 4; ++i) h = hash_file(fs::path(dir) / split_file(i), h);
  return h;
}

void save_dataset(const std::string& dir, const Dataset& dataset) {
  fs::create_directories(dir);
  const std::vector<PreferenceSample>* splits[4] = {&dataset.train, &dataset.val,
                                                    &dataset.eval_hall, &dataset.eval_general};
  for (int i = 0; i < 4; ++i) write_split(fs::path(dir) / split_file(i), *splits[i]);

  json manifest{
      {"config", config_to_json(dataset.world.config)},
      {"seed", dataset.seed},
      {"counts",
       json{{"train", dataset.train.size()},
            {"val", dataset.val.size()},
            {"eval_hall", dataset.eval_hall.size()},
            {"eval_general", dataset.eval_general.size()}}},
      {"content_hash", hex64(dataset_content_hash(dir))},
      {"catalog_checksum", hex64(checksum(dataset.world.catalog->cooccurrence))}};
  std::ofstream os(fs::path(dir) / "manifest.json");
  if (!os) throw std::runtime_error("save_dataset: cannot write manifest in " + dir);
  os << manifest.dump(2) << '\n';
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream is(fs::path(dir) / "manifest.json");
  if (!is) throw std::runtime_error("load_dataset: missing manifest.json in " + dir);
  json manifest = json::parse(is);
  Dataset d;
  const WorldConfig config = config_from_json(manifest.at("config"));
  d.seed = manifest.at("seed").get<uint64_t>();
  d.world = World::make(config, d.seed);
  if (manifest.at("catalog_checksum").get<std::string>() !=
      hex64(checksum(d.world.catalog->cooccurrence))) {
    throw std::runtime_error("load_dataset: catalog mismatch in " + dir);
  }
  if (manifest.at("content_hash").get<std::string>() != hex64(dataset_content_hash(dir))) {
    throw std::runtime_error("load_dataset: content hash mismatch in " + dir);
  }
  d.train = read_split(fs::path(dir) / split_file(0), d.world);
  d.val = read_split(fs::path(dir) / split_file(1), d.world);
  d.eval_hall = read_split(fs::path(dir) / split_file(2), d.world);
  d.eval_general = read_split(fs::path(dir) / split_file(3), d.world);
  return d;
}

}  // namespace dcd
