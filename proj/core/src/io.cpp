#include "steppref/io.hpp"

#include <fstream>

#include <json.hpp>

#include "steppref/errors.hpp"

namespace steppref {

namespace {

using json = nlohmann::ordered_json;

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  return out;
}

// Applies `fn` to each nonempty line parsed as JSON, with path+line context
// on failure.
template <typename Fn>
void for_each_record(const std::string& path, Fn&& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path);
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json record;
    try {
      record = json::parse(line);
      fn(record);
    } catch (const json::exception& e) {
      throw IoError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

std::string modality_name(Modality m) { return m == Modality::audio ? "audio" : "visual"; }

Modality parse_modality(const std::string& s) {
  if (s == "audio") return Modality::audio;
  if (s == "visual") return Modality::visual;
  throw IoError("unknown modality: " + s);
}

}  // namespace

// --- episodes -----------------------------------------------------------

void write_episodes(const std::string& path, std::span<const EpisodeSpec> episodes) {
  std::ofstream out = open_out(path);
  for (const EpisodeSpec& e : episodes) {
    json facts = json::array();
    for (const Fact& f : e.facts) {
      facts.push_back({f.key, f.value, modality_name(f.modality)});
    }
    json record = {
        {"id", e.id},
        {"seed", e.seed},
        {"config",
         {{"num_symbols", e.config.num_symbols},
          {"hops", e.config.hops},
          {"num_choices", e.config.num_choices},
          {"encoding_dim", e.config.encoding_dim},
          {"modality_split", e.config.modality_split}}},
        {"facts", std::move(facts)},
        {"question", {{"start_key", e.question.start_key}, {"hops", e.question.hops}}},
        {"choices", e.choices},
        {"reference_answer", e.reference_answer},
    };
    out << record.dump() << '\n';
  }
}

std::vector<EpisodeSpec> read_episodes(const std::string& path) {
  std::vector<EpisodeSpec> episodes;
  for_each_record(path, [&](const json& r) {
    EpisodeSpec e;
    e.id = r.at("id").get<std::string>();
    e.seed = r.at("seed").get<uint64_t>();
    const json& c = r.at("config");
    e.config.num_symbols = c.at("num_symbols").get<int>();
    e.config.hops = c.at("hops").get<int>();
    e.config.num_choices = c.at("num_choices").get<int>();
    e.config.encoding_dim = c.at("encoding_dim").get<int>();
    e.config.modality_split = c.at("modality_split").get<double>();
    for (const json& f : r.at("facts")) {
      e.facts.push_back(
          {f.at(0).get<int>(), f.at(1).get<int>(), parse_modality(f.at(2).get<std::string>())});
    }
    e.question.start_key = r.at("question").at("start_key").get<int>();
    e.question.hops = r.at("question").at("hops").get<int>();
    e.choices = r.at("choices").get<std::vector<int>>();
    e.reference_answer = r.at("reference_answer").get<int>();
    e.config.validate();
    episodes.push_back(std::move(e));
  });
  return episodes;
}

// --- streams ------------------------------------------------------------------

void write_streams(const std::string& path, std::span<const EpisodeSpec> episodes) {
  std::ofstream out = open_out(path);
  for (const EpisodeSpec& e : episodes) {
    auto [visual, audio] = encode_observation(e);
    // Interleave the two streams in timestamp order so readers see one
    // chronological record sequence per episode (writer order is not load-
    // bearing: readers regroup by modality).
    size_t vi = 0, ai = 0;
    auto emit = [&](Modality m, double timestamp,
                    const std::vector<std::vector<double>>& vectors) {
      json record = {{"episode_id", e.id},
                     {"modality", modality_name(m)},
                     {"timestamp", timestamp},
                     {"vectors", vectors}};
      out << record.dump() << '\n';
    };
    while (vi < visual.size() || ai < audio.size()) {
      bool take_audio = vi == visual.size() ||
                        (ai < audio.size() && audio[ai].timestamp < visual[vi].timestamp);
      if (take_audio) {
        emit(Modality::audio, audio[ai].timestamp, audio[ai].encodings);
        ++ai;
      } else {
        emit(Modality::visual, visual[vi].timestamp, visual[vi].encodings);
        ++vi;
      }
    }
  }
}

std::vector<StreamRecord> read_streams(const std::string& path) {
  std::vector<StreamRecord> records;
  for_each_record(path, [&](const json& r) {
    StreamRecord rec;
    rec.episode_id = r.at("episode_id").get<std::string>();
    rec.modality = parse_modality(r.at("modality").get<std::string>());
    rec.timestamp = r.at("timestamp").get<double>();
    rec.vectors = r.at("vectors").get<std::vector<std::vector<double>>>();
    records.push_back(std::move(rec));
  });
  return records;
}

// --- traces ---------------------------------------------------------------

void write_traces(const std::string& path, std::span<const ReasoningTrace> traces) {
  std::ofstream out = open_out(path);
  for (const ReasoningTrace& t : traces) {
    json steps = json::array();
    for (const Step& s : t.steps) steps.push_back(s.tokens);
    json record = {{"episode_id", t.episode_id},
                   {"steps", std::move(steps)},
                   {"answer", t.answer ? json(*t.answer) : json(nullptr)}};
    out << record.dump() << '\n';
  }
}

std::vector<ReasoningTrace> read_traces(const std::string& path) {
  std::vector<ReasoningTrace> traces;
  for_each_record(path, [&](const json& r) {
    ReasoningTrace t;
    t.episode_id = r.at("episode_id").get<std::string>();
    for (const json& s : r.at("steps")) {
      t.steps.push_back({s.get<std::vector<TokenId>>()});
    }
    const json& answer = r.at("answer");
    if (!answer.is_null()) t.answer = answer.get<std::string>();
    traces.push_back(std::move(t));
  });
  return traces;
}

// --- preference dataset ------------------------------------------------------

void write_preferences(const std::string& path, const PreferenceDataset& dataset) {
  std::ofstream out = open_out(path);
  for (const StoredFullPathPair& p : dataset.fullpath_pairs) {
    json record = {{"type", "fullpath"},
                   {"episode_id", p.episode_id},
                   {"preferred", p.preferred},
                   {"rejected", p.rejected},
                   {"log_prob_gap", p.log_prob_gap}};
    out << record.dump() << '\n';
  }
  for (const StoredStepPair& p : dataset.step_pairs) {
    json record = {
        {"type", "step"},
        {"episode_id", p.episode_id},
        {"prefix", p.prefix_steps},
        {"a", p.step_a},
        {"b", p.step_b},
        {"est_a", {{"n", p.est_a.num_rollouts}, {"correct", p.est_a.num_correct}}},
        {"est_b", {{"n", p.est_b.num_rollouts}, {"correct", p.est_b.num_correct}}},
        {"alpha", p.alpha},
    };
    out << record.dump() << '\n';
  }
  for (const StoredStepValue& v : dataset.step_values) {
    json record = {{"type", "step_value"},
                   {"episode_id", v.episode_id},
                   {"prefix", v.prefix_steps},
                   {"est", {{"n", v.est.num_rollouts}, {"correct", v.est.num_correct}}}};
    out << record.dump() << '\n';
  }
}

PreferenceDataset read_preferences(const std::string& path) {
  PreferenceDataset dataset;
  for_each_record(path, [&](const json& r) {
    const std::string type = r.at("type").get<std::string>();
    if (type == "fullpath") {
      StoredFullPathPair p;
      p.episode_id = r.at("episode_id").get<std::string>();
      p.preferred = r.at("preferred").get<std::vector<std::vector<TokenId>>>();
      p.rejected = r.at("rejected").get<std::vector<std::vector<TokenId>>>();
      p.log_prob_gap = r.at("log_prob_gap").get<double>();
      dataset.fullpath_pairs.push_back(std::move(p));
    } else if (type == "step") {
      StoredStepPair p;
      p.episode_id = r.at("episode_id").get<std::string>();
      p.prefix_steps = r.at("prefix").get<std::vector<std::vector<TokenId>>>();
      p.step_a = r.at("a").get<std::vector<TokenId>>();
      p.step_b = r.at("b").get<std::vector<TokenId>>();
      p.est_a = {r.at("est_a").at("n").get<int>(), r.at("est_a").at("correct").get<int>()};
      p.est_b = {r.at("est_b").at("n").get<int>(), r.at("est_b").at("correct").get<int>()};
      p.alpha = r.at("alpha").get<double>();
      dataset.step_pairs.push_back(std::move(p));
    } else if (type == "step_value") {
      StoredStepValue v;
      v.episode_id = r.at("episode_id").get<std::string>();
      v.prefix_steps = r.at("prefix").get<std::vector<std::vector<TokenId>>>();
      v.est = {r.at("est").at("n").get<int>(), r.at("est").at("correct").get<int>()};
      dataset.step_values.push_back(std::move(v));
    } else {
      throw IoError("unknown preference record type: " + type);
    }
  });
  return dataset;
}

// --- metrics ----------------------------------------------------------------

void write_metrics(const std::string& path, std::span<const MetricsRecord> records) {
  std::ofstream out = open_out(path);
  for (const MetricsRecord& m : records) {
    json record = {{"stage", m.stage},
                   {"update", m.update},
                   {"loss", m.loss},
                   {"accuracy", m.accuracy ? json(*m.accuracy) : json(nullptr)},
                   {"seed", m.seed}};
    out << record.dump() << '\n';
  }
}

std::vector<MetricsRecord> read_metrics(const std::string& path) {
  std::vector<MetricsRecord> records;
  for_each_record(path, [&](const json& r) {
    MetricsRecord m;
    m.stage = r.at("stage").get<std::string>();
    m.update = r.at("update").get<long>();
    m.loss = r.at("loss").get<double>();
    if (!r.at("accuracy").is_null()) m.accuracy = r.at("accuracy").get<double>();
    m.seed = r.at("seed").get<uint64_t>();
    records.push_back(std::move(m));
  });
  return records;
}

// --- susceptibility dumps -----------------------------------------------------

void write_susceptibilities(const std::string& path,
                            std::span<const SusceptibilityRecord> records) {
  std::ofstream out = open_out(path);
  for (const SusceptibilityRecord& r : records) {
    json record = {{"episode_id", r.episode_id}, {"d", r.d}, {"selected", r.selected}};
    out << record.dump() << '\n';
  }
}

std::vector<SusceptibilityRecord> read_susceptibilities(const std::string& path) {
  std::vector<SusceptibilityRecord> records;
  for_each_record(path, [&](const json& r) {
    SusceptibilityRecord rec;
    rec.episode_id = r.at("episode_id").get<std::string>();
    rec.d = r.at("d").get<std::vector<double>>();
    rec.selected = r.at("selected").get<std::vector<int>>();
    records.push_back(std::move(rec));
  });
  return records;
}

// --- csv ---------------------------------------------------------------------

void write_csv(const std::string& path, std::span<const std::string> header,
               std::span<const std::vector<std::string>> rows) {
  std::ofstream out = open_out(path);
  auto emit_row = [&](std::span<const std::string> cells) {
    for (size_t i = 0; i < cells.size(); ++i) {
      if (i) out << ',';
      out << cells[i];
    }
    out << '\n';
  };
  emit_row(header);
  for (const auto& row : rows) emit_row(row);
}

}  // namespace steppref
