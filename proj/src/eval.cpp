#include "dcd/eval.hpp"

#include "dcd/errors.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

namespace dcd {

using nlohmann::json;

std::string to_string(ProbeRegime r) {
  switch (r) {
    case ProbeRegime::Random: return "random";
    case ProbeRegime::Popular: return "popular";
    case ProbeRegime::Adversarial: return "adversarial";
  }
  return "?";
}

namespace {

// Ordered parallel map: results land in per-index slots, so thread count
// never changes the outcome.
void parallel_for(size_t n, int threads, const std::function<void(size_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  auto worker = [&] {
    for (size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
  };
  std::vector<std::thread> pool;
  const int k = std::min<int>(threads, static_cast<int>(n));
  pool.reserve(static_cast<size_t>(k));
  for (int t = 0; t < k; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
}

int pick_absent(const Scene& scene, ProbeRegime regime, Rng& rng) {
  const std::vector<int> absent = scene.absent();
  switch (regime) {
    case ProbeRegime::Random:
      return absent[static_cast<size_t>(rng.uniform_int(static_cast<int>(absent.size())))];
    case ProbeRegime::Popular: {
      int best = absent[0];
      for (int obj : absent) {
        if (scene.popularity()[obj] > scene.popularity()[best]) best = obj;
      }
      return best;
    }
    case ProbeRegime::Adversarial: {
      int best = absent[0];
      Scalar best_w = -1;
      for (int obj : absent) {
        Scalar w = 0;
        for (int p : scene.present) w += scene.cooccurrence()(p, obj);
        if (w > best_w) {
          best_w = w;
          best = obj;
        }
      }
      return best;
    }
  }
  return absent[0];
}

}  // namespace

ProbeSet build_probe_set(const std::vector<PreferenceSample>& pool, ProbeRegime regime,
                         int count, Rng rng) {
  if (pool.empty()) throw std::invalid_argument("build_probe_set: empty sample pool");
  if (count < 2) throw std::invalid_argument("build_probe_set: need at least 2 probes");
  count -= count % 2;
  ProbeSet set;
  set.regime = regime;
  set.probes.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    const PreferenceSample& s = pool[static_cast<size_t>(i) % pool.size()];
    Rng probe_rng = rng.derive(static_cast<uint64_t>(i));
    Probe p;
    p.v = s.v;
    p.scene = s.scene;
    p.present = (i % 2 == 0);
    if (p.present) {
      p.object_index = s.scene.present[static_cast<size_t>(
          probe_rng.uniform_int(static_cast<int>(s.scene.present.size())))];
    } else {
      p.object_index = pick_absent(s.scene, regime, probe_rng);
    }
    set.probes.push_back(std::move(p));
  }
  return set;
}

HallucinationResult hallucination_rate(const Decoder& decode,
                                       const std::vector<PreferenceSample>& describe_set,
                                       const Vocab& vocab, int threads) {
  if (describe_set.empty()) throw std::invalid_argument("hallucination_rate: empty eval set");
  const size_t n = describe_set.size();
  std::vector<TokenSequence> outputs(n);
  parallel_for(n, threads, [&](size_t i) {
    outputs[i] = decode(describe_set[i].x, describe_set[i].v,
                        static_cast<uint64_t>(describe_set[i].id));
  });
  HallucinationResult r;
  r.total = static_cast<int>(n);
  Scalar recall_sum = 0;
  int hallucinated = 0;
  for (size_t i = 0; i < n; ++i) {
    const Scene& scene = describe_set[i].scene;
    const std::vector<int> mentioned = objects_in_response(vocab, outputs[i]);
    const bool has_eos =
        std::find(outputs[i].begin(), outputs[i].end(), Vocab::eos) != outputs[i].end();
    if (mentioned.empty() && !has_eos) {
      ++r.malformed;  // undecodable; counted non-hallucinated
    } else if (std::any_of(mentioned.begin(), mentioned.end(),
                           [&](int obj) { return !scene.contains(obj); })) {
      ++hallucinated;
    }
    std::set<int> unique(mentioned.begin(), mentioned.end());
    int hits = 0;
    for (int obj : scene.present) hits += unique.count(obj) ? 1 : 0;
    recall_sum += static_cast<Scalar>(hits) / static_cast<Scalar>(scene.present.size());
  }
  r.rate = static_cast<double>(hallucinated) / static_cast<double>(n);
  r.recall = recall_sum / static_cast<Scalar>(n);
  return r;
}

double ConfusionMatrix::accuracy() const {
  const auto total = tp + fp + tn + fn;
  return total == 0 ? 0.0 : static_cast<double>(tp + tn) / static_cast<double>(total);
}
double ConfusionMatrix::precision() const {
  return tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
}
double ConfusionMatrix::recall() const {
  return tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
}
double ConfusionMatrix::f1() const {
  const double p = precision(), r = recall();
  return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
}

ExistenceResult existence_accuracy(const Decoder& decode, const ProbeSet& probes,
                                   const Vocab& vocab, int threads) {
  if (probes.probes.empty()) throw std::invalid_argument("existence_accuracy: empty probe set");
  const size_t n = probes.probes.size();
  std::vector<TokenSequence> outputs(n);
  std::vector<TokenSequence> prompts(n);
  for (size_t i = 0; i < n; ++i) {
    prompts[i] = exist_prompt(vocab, probes.probes[i].object_index);
  }
  parallel_for(n, threads, [&](size_t i) {
    outputs[i] = decode(prompts[i], probes.probes[i].v, static_cast<uint64_t>(i));
  });
  ExistenceResult r;
  r.total = static_cast<int>(n);
  for (size_t i = 0; i < n; ++i) {
    const bool truth = probes.probes[i].present;
    const int first = outputs[i].empty() ? -1 : outputs[i].front();
    bool predicted_yes;
    if (first == vocab.yes()) {
      predicted_yes = true;
    } else if (first == vocab.no()) {
      predicted_yes = false;
    } else {
      // Malformed output is scored as the wrong class.
      ++r.malformed;
      predicted_yes = !truth;
    }
    if (truth && predicted_yes) ++r.cm.tp;
    else if (truth && !predicted_yes) ++r.cm.fn;
    else if (!truth && predicted_yes) ++r.cm.fp;
    else ++r.cm.tn;
  }
  r.accuracy = r.cm.accuracy();
  r.f1 = r.cm.f1();
  return r;
}

GeneralResult general_accuracy(const Decoder& decode,
                               const std::vector<PreferenceSample>& general_set,
                               const World& world, int threads) {
  if (general_set.empty()) throw std::invalid_argument("general_accuracy: empty eval set");
  const size_t n = general_set.size();
  std::vector<TokenSequence> outputs(n);
  parallel_for(n, threads, [&](size_t i) {
    outputs[i] = decode(general_set[i].x, general_set[i].v,
                        static_cast<uint64_t>(general_set[i].id));
  });
  GeneralResult r;
  r.total = static_cast<int>(n);
  int correct = 0;
  for (size_t i = 0; i < n; ++i) {
    const TokenSequence expected =
        oracle_response(world, general_set[i].scene, general_set[i].x);
    if (outputs[i] == expected) {
      ++correct;
    } else {
      const bool any_digit = std::any_of(outputs[i].begin(), outputs[i].end(), [&](int id) {
        return id != Vocab::eos && world.vocab.is_digit(id);
      });
      if (!any_digit) ++r.malformed;
    }
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  return r;
}

DisplacementResult likelihood_displacement_trace(const TrainTrace& trace) {
  if (trace.rows.size() < 2) {
    throw std::invalid_argument("likelihood_displacement_trace: need at least 2 trace rows");
  }
  const TraceRow& first = trace.rows.front();
  const TraceRow& last = trace.rows.back();
  DisplacementResult r;
  r.dlogp_w = last.logp_w - first.logp_w;
  r.dlogp_l = last.logp_l - first.logp_l;
  r.dmargin = last.margin - first.margin;
  r.displaced = (last.logp_w < first.logp_w) && (last.margin > first.margin);
  return r;
}

// --- method wiring ---

const std::vector<std::string> kKnownMethods = {"greedy",  "vcd",     "other_image", "dpo",
                                                "dcd_neg", "dcd_pos", "dcd_both"};

namespace {

const Checkpoint* require_checkpoint(const char* method, const Checkpoint* ckpt) {
  if (ckpt == nullptr) {
    throw DependencyError(std::string("compare_methods: method '") + method +
                          "' needs a checkpoint that was not provided");
  }
  return ckpt;
}

DecodeConfig base_decode_config(const EvalConfig& config) {
  DecodeConfig d;
  d.alpha = config.alpha;
  d.sigma = config.sigma;
  d.max_length = config.max_length;
  d.pos_source = config.pos_source;
  return d;
}

}  // namespace

Decoder make_method_decoder(const std::string& method, const EvalInputs& inputs,
                            const EvalConfig& config) {
  const DecodeConfig base = base_decode_config(config);
  const Rng eval_rng = Rng(config.seed).derive("eval");

  if (method == "greedy") {
    const Checkpoint* sft = require_checkpoint("greedy", inputs.sft);
    return [&params = sft->params, &proj = sft->positive, base](const TokenSequence& x,
                                                                const Mat& v, uint64_t) {
      return greedy_decode(params, proj, x, v, base);
    };
  }
  if (method == "vcd") {
    const Checkpoint* sft = require_checkpoint("vcd", inputs.sft);
    DecodeConfig cfg = base;
    cfg.strategy = DecodeStrategy::Vcd;
    Rng noise_root = eval_rng.derive("vcd_noise");
    return [&params = sft->params, &proj = sft->positive, cfg, noise_root](
               const TokenSequence& x, const Mat& v, uint64_t id) {
      Rng rng = noise_root.derive(id);
      return decode_vcd(params, proj, x, v, cfg, rng);
    };
  }
  if (method == "other_image") {
    const Checkpoint* sft = require_checkpoint("other_image", inputs.sft);
    if (inputs.dataset == nullptr || inputs.dataset->train.empty()) {
      throw DependencyError("compare_methods: method 'other_image' needs dataset train samples");
    }
    DecodeConfig cfg = base;
    cfg.strategy = DecodeStrategy::OtherImage;
    Rng pick_root = eval_rng.derive("other_image");
    const auto* train = &inputs.dataset->train;
    return [&params = sft->params, &proj = sft->positive, cfg, pick_root, train](
               const TokenSequence& x, const Mat& v, uint64_t id) {
      Rng rng = pick_root.derive(id);
      const auto& other = (*train)[static_cast<size_t>(
          rng.uniform_int(static_cast<int>(train->size())))];
      return decode_other_image(params, proj, x, v, other.v, cfg);
    };
  }
  if (method == "dpo") {
    const Checkpoint* dpo = require_checkpoint("dpo", inputs.dpo);
    return [&params = dpo->params, &proj = dpo->positive, base](const TokenSequence& x,
                                                                const Mat& v, uint64_t) {
      return greedy_decode(params, proj, x, v, base);
    };
  }

  const Checkpoint* dcd = nullptr;
  if (method == "dcd_neg") dcd = require_checkpoint("dcd_neg", inputs.dcd_neg);
  else if (method == "dcd_pos") dcd = require_checkpoint("dcd_pos", inputs.dcd_pos);
  else if (method == "dcd_both") dcd = require_checkpoint("dcd_both", inputs.dcd_both);
  else {
    std::string valid;
    for (const auto& m : kKnownMethods) valid += (valid.empty() ? "" : ", ") + m;
    throw ConfigError("unknown method '" + method + "'; valid methods: " + valid);
  }

  // dcd_neg defaults to the SFT projector on the positive path; dcd_pos and
  // dcd_both contrast their own trained positive against their negative.
  const VisualProjection* positive = &dcd->positive;
  if (method == "dcd_neg" && config.pos_source == PosPathSource::SftProj) {
    positive = &require_checkpoint("dcd_neg(positive path)", inputs.sft)->positive;
  }
  DecodeConfig cfg = base;
  cfg.strategy = DecodeStrategy::Dcd;
  return [&params = dcd->params, positive, &negative = dcd->negative, cfg](
             const TokenSequence& x, const Mat& v, uint64_t) {
    return decode_dcd(params, ProjectionPair{*positive, negative}, x, v, cfg);
  };
}

namespace {

std::pair<Scalar, Scalar> method_mean_log_probs(const std::string& method,
                                                const EvalInputs& inputs,
                                                const EvalConfig& config) {
  const ModelParams* params = nullptr;
  const VisualProjection* proj = nullptr;
  if (method == "dpo") {
    params = &inputs.dpo->params;
    proj = &inputs.dpo->positive;
  } else if (method == "dcd_neg") {
    params = &inputs.dcd_neg->params;
    proj = config.pos_source == PosPathSource::SftProj ? &inputs.sft->positive
                                                       : &inputs.dcd_neg->positive;
  } else if (method == "dcd_pos") {
    params = &inputs.dcd_pos->params;
    proj = &inputs.dcd_pos->positive;
  } else if (method == "dcd_both") {
    params = &inputs.dcd_both->params;
    proj = &inputs.dcd_both->positive;
  } else {
    params = &inputs.sft->params;
    proj = &inputs.sft->positive;
  }
  const auto& val = inputs.dataset->val;
  if (val.empty()) return {0.0, 0.0};
  Scalar lw = 0, ll = 0;
  for (const auto& s : val) {
    lw += sequence_log_prob(*params, *proj, s.x, s.v, s.y_w);
    ll += sequence_log_prob(*params, *proj, s.x, s.v, s.y_l);
  }
  return {lw / static_cast<Scalar>(val.size()), ll / static_cast<Scalar>(val.size())};
}

std::vector<uint64_t> input_checksums(const EvalInputs& inputs) {
  std::vector<uint64_t> sums;
  for (const Checkpoint* c :
       {inputs.sft, inputs.dpo, inputs.dcd_neg, inputs.dcd_pos, inputs.dcd_both}) {
    if (c == nullptr) continue;
    sums.push_back(params_checksum(c->params));
    sums.push_back(projection_checksum(c->positive));
    sums.push_back(projection_checksum(c->negative));
  }
  return sums;
}

}  // namespace

EvalReport compare_methods(const EvalInputs& inputs, const EvalConfig& config) {
  if (inputs.dataset == nullptr) {
    throw std::invalid_argument("compare_methods: dataset is required");
  }
  if (config.methods.empty()) {
    throw ConfigError("compare_methods: no methods requested");
  }
  for (const auto& m : config.methods) {
    if (std::find(kKnownMethods.begin(), kKnownMethods.end(), m) == kKnownMethods.end()) {
      std::string valid;
      for (const auto& k : kKnownMethods) valid += (valid.empty() ? "" : ", ") + k;
      throw ConfigError("unknown method '" + m + "'; valid methods: " + valid);
    }
  }
  const std::vector<uint64_t> sums_before = input_checksums(inputs);

  const Dataset& ds = *inputs.dataset;
  const Rng probe_rng = Rng(config.seed).derive("probes");
  const std::array<ProbeSet, 3> probe_sets = {
      build_probe_set(ds.eval_hall, ProbeRegime::Random, config.probes_per_regime,
                      probe_rng.derive("random")),
      build_probe_set(ds.eval_hall, ProbeRegime::Popular, config.probes_per_regime,
                      probe_rng.derive("popular")),
      build_probe_set(ds.eval_hall, ProbeRegime::Adversarial, config.probes_per_regime,
                      probe_rng.derive("adversarial"))};

  EvalReport report;
  report.seed = config.seed;
  report.dataset_hash = checksum(ds.world.w_enc);
  for (const auto& name : config.methods) {
    Decoder decode = make_method_decoder(name, inputs, config);
    MethodReport mr;
    mr.name = name;
    mr.hall = hallucination_rate(decode, ds.eval_hall, ds.world.vocab, config.threads);
    for (int r = 0; r < 3; ++r) {
      mr.exist[static_cast<size_t>(r)] =
          existence_accuracy(decode, probe_sets[static_cast<size_t>(r)], ds.world.vocab,
                             config.threads);
    }
    mr.general = general_accuracy(decode, ds.eval_general, ds.world, config.threads);
    auto [lw, ll] = method_mean_log_probs(name, inputs, config);
    mr.mean_logp_w = lw;
    mr.mean_logp_l = ll;
    report.methods.push_back(std::move(mr));
  }

  if (input_checksums(inputs) != sums_before) {
    throw std::logic_error("compare_methods: evaluation mutated model weights");
  }
  return report;
}

// --- report serialization ---

namespace {

json existence_to_json(const ExistenceResult& e) {
  return json{{"accuracy", e.accuracy},
              {"f1", e.f1},
              {"tp", e.cm.tp},
              {"fp", e.cm.fp},
              {"tn", e.cm.tn},
              {"fn", e.cm.fn},
              {"malformed", e.malformed},
              {"total", e.total}};
}

ExistenceResult existence_from_json(const json& j) {
  ExistenceResult e;
  e.accuracy = j.at("accuracy").get<double>();
  e.f1 = j.at("f1").get<double>();
  e.cm.tp = j.at("tp").get<int64_t>();
  e.cm.fp = j.at("fp").get<int64_t>();
  e.cm.tn = j.at("tn").get<int64_t>();
  e.cm.fn = j.at("fn").get<int64_t>();
  e.malformed = j.at("malformed").get<int>();
  e.total = j.at("total").get<int>();
  return e;
}

constexpr const char* kReportFooter =
    "All metrics are scene-oracle checkable; judged-quality scores are out of scope.";

}  // namespace

std::string EvalReport::to_json() const {
  json j;
  j["seed"] = seed;
  j["dataset_hash"] = dataset_hash;
  j["note"] = kReportFooter;
  j["methods"] = json::array();
  for (const auto& m : methods) {
    json jm;
    jm["name"] = m.name;
    jm["hallucination"] = json{{"rate", m.hall.rate},
                               {"recall", m.hall.recall},
                               {"malformed", m.hall.malformed},
                               {"total", m.hall.total}};
    jm["existence"] = json{{"random", existence_to_json(m.exist[0])},
                           {"popular", existence_to_json(m.exist[1])},
                           {"adversarial", existence_to_json(m.exist[2])}};
    jm["general"] = json{{"accuracy", m.general.accuracy},
                         {"malformed", m.general.malformed},
                         {"total", m.general.total}};
    jm["mean_logp_w"] = m.mean_logp_w;
    jm["mean_logp_l"] = m.mean_logp_l;
    j["methods"].push_back(std::move(jm));
  }
  return j.dump(2) + "\n";
}

EvalReport EvalReport::from_json(const std::string& text) {
  json j = json::parse(text);
  EvalReport r;
  r.seed = j.at("seed").get<uint64_t>();
  r.dataset_hash = j.at("dataset_hash").get<uint64_t>();
  for (const auto& jm : j.at("methods")) {
    MethodReport m;
    m.name = jm.at("name").get<std::string>();
    m.hall.rate = jm.at("hallucination").at("rate").get<double>();
    m.hall.recall = jm.at("hallucination").at("recall").get<double>();
    m.hall.malformed = jm.at("hallucination").at("malformed").get<int>();
    m.hall.total = jm.at("hallucination").at("total").get<int>();
    m.exist[0] = existence_from_json(jm.at("existence").at("random"));
    m.exist[1] = existence_from_json(jm.at("existence").at("popular"));
    m.exist[2] = existence_from_json(jm.at("existence").at("adversarial"));
    m.general.accuracy = jm.at("general").at("accuracy").get<double>();
    m.general.malformed = jm.at("general").at("malformed").get<int>();
    m.general.total = jm.at("general").at("total").get<int>();
    m.mean_logp_w = jm.at("mean_logp_w").get<Scalar>();
    m.mean_logp_l = jm.at("mean_logp_l").get<Scalar>();
    r.methods.push_back(std::move(m));
  }
  return r;
}

std::string EvalReport::to_table() const {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-12s %10s %8s %8s %8s %8s %8s %8s %8s %9s %9s\n", "method",
                "hall_rate", "recall", "acc_rnd", "f1_rnd", "acc_pop", "f1_pop", "acc_adv",
                "f1_adv", "general", "logp_w");
  os << buf;
  os << std::string(110, '-') << "\n";
  for (const auto& m : methods) {
    std::snprintf(buf, sizeof buf,
                  "%-12s %10.4f %8.4f %8.4f %8.4f %8.4f %8.4f %8.4f %8.4f %9.4f %9.3f\n",
                  m.name.c_str(), m.hall.rate, m.hall.recall, m.exist[0].accuracy, m.exist[0].f1,
                  m.exist[1].accuracy, m.exist[1].f1, m.exist[2].accuracy, m.exist[2].f1,
                  m.general.accuracy, m.mean_logp_w);
    os << buf;
  }
  os << "note: " << kReportFooter << "\n";
  return os.str();
}

void export_decodes(const std::string& path, const std::string& strategy, Scalar alpha,
                    const Decoder& decode, const std::vector<PreferenceSample>& samples,
                    const Vocab& vocab) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("export_decodes: cannot open " + path);
  for (const auto& s : samples) {
    const TokenSequence tokens = decode(s.x, s.v, static_cast<uint64_t>(s.id));
    json j{{"id", s.id},
           {"strategy", strategy},
           {"alpha", alpha},
           {"tokens", tokens},
           {"text", detokenize(vocab, tokens)}};
    os << j.dump() << '\n';
  }
}

}  // namespace dcd
