#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "heft/rng.hpp"

namespace heft {

struct BoolExample {
  std::string passage;
  std::string question;
  bool answer = false;
};

// 256 raw byte tokens plus five reserved specials. Round-tripping byte
// strings is exact; the YES/NO specials detokenize to the answer words so
// generated text feeds straight into answer extraction.
class ByteTokenizer {
 public:
  static constexpr int pad_id = 256;
  static constexpr int bos_id = 257;
  static constexpr int eos_id = 258;
  static constexpr int yes_id = 259;
  static constexpr int no_id = 260;
  static constexpr std::size_t vocab_size = 261;

  std::vector<int> tokenize(std::string_view text) const {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<int>(c));
    return ids;
  }

  std::string detokenize(std::span<const int> ids) const {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
        throw std::out_of_range("detokenize: id " + std::to_string(id) + " out of range [0," +
                                std::to_string(vocab_size) + ")");
      }
      if (id < 256) {
        out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
      } else if (id == yes_id) {
        out += "Yes";
      } else if (id == no_id) {
        out += "No";
      }
      // PAD/BOS/EOS contribute nothing
    }
    return out;
  }
};

struct SupervisedRecord {
  std::vector<int> prompt_tokens;
  int answer_token = ByteTokenizer::no_id;
  std::size_t last_position = 0;
};

inline constexpr const char* kPromptInstruction = "Answer with only \"Yes\" or \"No\".";

inline std::string format_prompt(const BoolExample& ex) {
  if (ex.passage.empty() || ex.question.empty()) {
    throw std::invalid_argument("format_prompt: passage and question must be non-empty");
  }
  std::string out;
  out.reserve(64 + ex.passage.size() + ex.question.size());
  out += kPromptInstruction;
  out += "\nPassage: ";
  out += ex.passage;
  out += "\nQuestion: ";
  out += ex.question;
  out += "\nAnswer:";
  return out;
}

inline SupervisedRecord build_supervised_record(const BoolExample& ex, const ByteTokenizer& tok,
                                                std::size_t max_seq) {
  std::vector<int> prompt{ByteTokenizer::bos_id};
  for (int id : tok.tokenize(format_prompt(ex))) prompt.push_back(id);
  if (prompt.size() > max_seq - 1) {
    throw std::invalid_argument("prompt of " + std::to_string(prompt.size()) +
                                " tokens does not fit max_seq-1 = " + std::to_string(max_seq - 1));
  }
  SupervisedRecord rec;
  rec.last_position = prompt.size() - 1;
  rec.prompt_tokens = std::move(prompt);
  rec.answer_token = ex.answer ? ByteTokenizer::yes_id : ByteTokenizer::no_id;
  return rec;
}

inline std::vector<SupervisedRecord> build_supervised_records(std::span<const BoolExample> examples,
                                                              const ByteTokenizer& tok,
                                                              std::size_t max_seq) {
  std::vector<SupervisedRecord> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back(build_supervised_record(ex, tok, max_seq));
  return out;
}

namespace synth {

// Name shapes keep the three symbol kinds distinguishable at byte level:
// entities are CVC ("bak"), classes are CVCV ("bako"), properties are CVC+"y"
// ("gimy"). Class and property name lists are fixed enumerations, and the
// class<->property pairing is index-based, so the rule ontology ("every bako
// is gimy.") is shared by every generated world; a seed picks entities,
// their memberships and the example mix.
inline constexpr std::string_view kConsonants = "bcdfghjklmnprstvwz";
inline constexpr std::string_view kVowels = "aeiou";

inline std::string nth_cvc(std::size_t i, std::size_t offset = 0) {
  const std::size_t nc = kConsonants.size(), nv = kVowels.size();
  const std::size_t c1 = (i + offset) % nc;  // leading letter varies fastest
  const std::size_t v = (i / nc) % nv;
  const std::size_t c2 = (i / (nc * nv)) % nc;
  return std::string{kConsonants[c1], kVowels[v], kConsonants[c2]};
}

inline std::size_t max_names() { return kConsonants.size() * kConsonants.size() * kVowels.size(); }

inline std::string entity_name(std::size_t i) { return nth_cvc(i, 0); }
inline std::string property_name(std::size_t i) { return nth_cvc(i, 5) + "y"; }
inline std::string class_name(std::size_t i) {
  return nth_cvc(i, 11) + std::string{kVowels[(i / 7) % kVowels.size()]};
}

inline std::size_t class_count(std::size_t n_properties) {
  return std::max<std::size_t>(2, n_properties / 4);
}

struct World {
  std::vector<std::string> entities;    // seeded selection
  std::vector<std::size_t> membership;  // entity index -> class index
  std::vector<std::string> classes;     // fixed enumeration
  std::vector<std::string> properties;  // fixed enumeration
  std::vector<std::size_t> grantor;     // property index -> class index (fixed pairing)
};

inline World build_world(std::uint64_t seed, std::size_t n_entities, std::size_t n_properties) {
  if (n_entities < 2 || n_properties < 2) {
    throw std::invalid_argument("synth_generate: need at least 2 entities and 2 properties");
  }
  if (n_entities > max_names() || n_properties > max_names()) {
    throw std::invalid_argument("synth_generate: name pool exhausted");
  }
  const std::size_t n_classes = class_count(n_properties);
  if (n_entities < std::max<std::size_t>(5, n_classes)) {
    throw std::invalid_argument("synth_generate: unsatisfiable parameters: need at least " +
                                std::to_string(std::max<std::size_t>(5, n_classes)) + " entities");
  }
  World w;
  Rng rng(Rng::mix(seed, 0xE17));
  std::vector<std::size_t> ids(max_names());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  rng.shuffle(ids);
  for (std::size_t i = 0; i < n_entities; ++i) w.entities.push_back(entity_name(ids[i]));
  for (std::size_t j = 0; j < n_classes; ++j) w.classes.push_back(class_name(j));
  for (std::size_t j = 0; j < n_properties; ++j) {
    w.properties.push_back(property_name(j));
    w.grantor.push_back(j % n_classes);
  }
  // round-robin over a seeded entity order keeps every class populated
  std::vector<std::size_t> order(n_entities);
  for (std::size_t i = 0; i < n_entities; ++i) order[i] = i;
  rng.shuffle(order);
  w.membership.assign(n_entities, 0);
  for (std::size_t i = 0; i < n_entities; ++i) w.membership[order[i]] = i % n_classes;
  return w;
}

inline std::string fact_sentence(const World& w, std::size_t e, std::size_t p) {
  return w.entities[e] + " is " + w.properties[p] + ".";
}
inline std::string membership_sentence(const World& w, std::size_t e) {
  return w.entities[e] + " is a " + w.classes[w.membership[e]] + ".";
}
inline std::string rule_sentence(const World& w, std::size_t p) {
  return "every " + w.classes[w.grantor[p]] + " is " + w.properties[p] + ".";
}
inline std::string question_sentence(const World& w, std::size_t e, std::size_t p) {
  return "is " + w.entities[e] + " " + w.properties[p] + "?";
}

// Properties consistent with an entity's class under the fixed pairing.
inline std::vector<std::size_t> class_properties(const World& w, std::size_t class_index) {
  std::vector<std::size_t> out;
  for (std::size_t p = 0; p < w.properties.size(); ++p) {
    if (w.grantor[p] == class_index) out.push_back(p);
  }
  return out;
}

}  // namespace synth

// Deterministic inferential yes/no task. chain=1 passages answer the question
// through one direct property fact; chain=2 passages require composing a
// membership fact with a class rule. Labels come out exactly balanced and
// every one is provable (or provably absent) from the passage text alone.
inline std::vector<BoolExample> synth_generate(std::uint64_t seed, std::size_t n,
                                               std::size_t n_entities, std::size_t n_properties,
                                               int chain) {
  if (n < 2 || n % 2 != 0) {
    throw std::invalid_argument("synth_generate: n must be even and at least 2");
  }
  if (chain != 1 && chain != 2) {
    throw std::invalid_argument("synth_generate: chain must be 1 or 2");
  }
  synth::World w = synth::build_world(seed, n_entities, n_properties);

  // Question pools. chain=2 asks about the fact+rule composition, so labels
  // split on whether the entity's class grants the property. chain=1 asks
  // about a direct fact, and both labels draw from class-consistent pairs:
  // whether the fact is in the passage is then the only signal, so the
  // question can never be settled from the rule ontology alone.
  std::vector<std::pair<std::size_t, std::size_t>> yes_pool, no_pool;
  std::vector<std::pair<std::size_t, std::size_t>> consistent, inconsistent;
  for (std::size_t e = 0; e < n_entities; ++e) {
    for (std::size_t p = 0; p < n_properties; ++p) {
      (w.grantor[p] == w.membership[e] ? consistent : inconsistent).emplace_back(e, p);
    }
  }
  Rng rng(Rng::mix(seed, 0x5A17));
  rng.shuffle(consistent);
  rng.shuffle(inconsistent);
  if (chain == 2) {
    yes_pool = consistent;
    no_pool = inconsistent;
  } else {
    if (consistent.size() < n) {
      throw std::invalid_argument(
          "synth_generate: unsatisfiable parameters: too few entities to balance " +
          std::to_string(n) + " examples");
    }
    yes_pool.assign(consistent.begin(), consistent.begin() + n / 2);
    no_pool.assign(consistent.begin() + n / 2, consistent.end());
  }
  if (yes_pool.size() < n / 2 || no_pool.size() < n / 2) {
    throw std::invalid_argument(
        "synth_generate: unsatisfiable parameters: too few entities to balance " +
        std::to_string(n) + " examples");
  }

  // Subjects inside one passage keep distinct final characters, so a
  // one-character key next to " is" suffices to address the right fact.
  auto pick_entity_except = [&](const std::vector<std::size_t>& taken) {
    auto clashes = [&](std::size_t e) {
      for (std::size_t t : taken) {
        if (t == e || w.entities[t].back() == w.entities[e].back()) return true;
      }
      return false;
    };
    for (int attempt = 0; attempt < 64; ++attempt) {
      std::size_t e = rng.below(n_entities);
      if (!clashes(e)) return e;
    }
    for (std::size_t e = 0; e < n_entities; ++e) {
      if (!clashes(e)) return e;
    }
    throw std::invalid_argument("synth_generate: unsatisfiable parameters: entity pool too small");
  };
  auto consistent_property = [&](std::size_t e) {
    const auto props = synth::class_properties(w, w.membership[e]);
    return props[rng.below(props.size())];
  };

  std::vector<bool> labels;
  labels.insert(labels.end(), n / 2, true);
  labels.insert(labels.end(), n / 2, false);
  rng.shuffle(labels);

  std::vector<BoolExample> out;
  out.reserve(n);
  std::size_t yi = 0, ni = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const bool label = labels[i];
    const auto [e, p] = label ? yes_pool[yi++] : no_pool[ni++];
    std::vector<std::string> sentences;

    if (chain == 1) {
      // Direct fact for yes; for no the entity's fact names a different
      // property of the same class. Passages ramp from a bare fact to the
      // full distractor set: the bare tier is what lets a from-scratch model
      // first connect the fact to the answer at all, the full tier is what
      // forces it to match the right subject. The asked property rides on a
      // carrier entity in half of the distractor-tier negatives, so property
      // presence alone cannot settle them.
      const std::uint64_t tier = rng.below(4);  // 0: bare, 1: one distractor, else full
      std::size_t fact_property = p;
      if (!label) {
        const auto own = synth::class_properties(w, w.membership[e]);
        std::vector<std::size_t> alternatives;
        for (std::size_t cand : own) {
          if (cand != p) alternatives.push_back(cand);
        }
        if (alternatives.empty()) {
          throw std::invalid_argument(
              "synth_generate: unsatisfiable parameters: class needs a second property");
        }
        fact_property = alternatives[rng.below(alternatives.size())];
      }
      sentences.push_back(synth::fact_sentence(w, e, fact_property));

      if (tier >= 1) {
        std::vector<std::size_t> carriers;
        for (std::size_t cand = 0; cand < n_entities; ++cand) {
          if (cand != e && w.entities[cand].back() != w.entities[e].back() &&
              w.membership[cand] == w.grantor[p]) {
            carriers.push_back(cand);
          }
        }
        const bool carry = !label && !carriers.empty() && rng.below(2) == 0;
        std::size_t eb = carry ? carriers[rng.below(carriers.size())] : pick_entity_except({e});
        sentences.push_back(synth::fact_sentence(w, eb, carry ? p : consistent_property(eb)));
        if (tier >= 2) {
          std::size_t em = pick_entity_except({e, eb});
          sentences.push_back(synth::membership_sentence(w, em));
          std::size_t pr = p;
          while (pr == p) pr = rng.below(n_properties);
          sentences.push_back(synth::rule_sentence(w, pr));
        }
      }
    } else {
      // membership of the asked entity plus the rule that grants the asked
      // property; the two connect exactly when the label is yes
      if (label != (w.grantor[p] == w.membership[e])) {
        throw std::logic_error("synth_generate: pool corrupted");
      }
      std::size_t em = pick_entity_except({e});
      std::size_t ef = pick_entity_except({e, em});
      sentences.push_back(synth::membership_sentence(w, e));
      sentences.push_back(synth::rule_sentence(w, p));
      sentences.push_back(synth::membership_sentence(w, em));
      std::size_t pr = p;
      while (pr == p) pr = rng.below(n_properties);
      sentences.push_back(synth::rule_sentence(w, pr));
      sentences.push_back(synth::fact_sentence(w, ef, consistent_property(ef)));
    }

    rng.shuffle(sentences);
    std::string passage;
    for (std::size_t s = 0; s < sentences.size(); ++s) {
      if (s) passage += " ";
      passage += sentences[s];
    }
    out.push_back(BoolExample{passage, synth::question_sentence(w, e, p), label});
  }
  return out;
}

// BoolQ-format JSONL: one object per line with string `question`, string
// `passage` and boolean `answer`. The synthetic exporter writes the same
// schema, so both paths share this loader.
inline std::vector<BoolExample> load_boolq_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset file: " + path);
  std::vector<BoolExample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path + " line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("question") || !j.contains("passage") ||
        !j.contains("answer") || !j["question"].is_string() || !j["passage"].is_string() ||
        !j["answer"].is_boolean()) {
      throw std::runtime_error(path + " line " + std::to_string(line_no) +
                               ": expected {question: string, passage: string, answer: bool}");
    }
    out.push_back(BoolExample{j["passage"].get<std::string>(), j["question"].get<std::string>(),
                              j["answer"].get<bool>()});
  }
  return out;
}

inline void save_boolq_jsonl(const std::string& path, std::span<const BoolExample> examples) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write dataset file: " + path);
  for (const auto& ex : examples) {
    nlohmann::json j;
    j["question"] = ex.question;
    j["passage"] = ex.passage;
    j["answer"] = ex.answer;
    out << j.dump() << "\n";
  }
}

}  // namespace heft
