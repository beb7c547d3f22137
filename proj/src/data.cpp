#include "refine/data.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "json.hpp"
#include "refine/rng.hpp"

namespace refine {

using nlohmann::json;

namespace {

// Digit-free prose so that numeric needles can never collide with filler.
const std::vector<std::string>& sentence_bank() {
  static const std::vector<std::string> bank{
      "The river bent slowly around the old mill.",
      "A light rain fell on the quiet town all afternoon.",
      "She folded the map and put it back in her coat.",
      "The baker opened his shop before the sun was up.",
      "Wind moved through the tall grass near the road.",
      "Nobody remembered who had planted the orchard.",
      "The train was late again, as it often was in winter.",
      "He kept his tools in a wooden box under the stairs.",
      "The library smelled of dust, paper and floor polish.",
      "Gulls circled above the harbor looking for scraps.",
      "The meeting ended without any clear decision.",
      "Her brother liked to fix bicycles in the garage.",
      "A narrow path led from the gate down to the lake.",
      "The soup needed more salt, but nobody said so.",
      "Lamps were lit one by one along the main street.",
      "The cat slept on the warm stones by the wall.",
      "They painted the fence white the following spring.",
      "The market was crowded with people buying fruit.",
      "An old radio played music in the back room.",
      "Clouds gathered over the hills late in the day.",
      "The teacher wrote a long list of words on the board.",
      "A small boat drifted near the edge of the reeds.",
      "The farmer checked the weather every single morning.",
      "Leaves collected in the corners of the courtyard.",
      "The bridge was closed while workers repaired it.",
      "Someone had left a blue umbrella by the door.",
      "The children counted the stars from the rooftop.",
      "Tea was served in thin cups with painted flowers.",
      "The hallway clock ticked loudly through the night.",
      "Fresh snow covered the fields beyond the village.",
      "The letter arrived a week after it was sent.",
      "Bees worked steadily among the lavender rows.",
      "The old captain told the same story every evening.",
      "A faint smell of smoke drifted from the chimney.",
      "The shop window displayed hats of every color.",
      "Frogs sang in the ditch after the heavy rain.",
      "The museum guard walked the same route each hour.",
      "Her notebook was full of sketches of birds.",
      "The road to the coast was lined with pine trees.",
      "A dog barked somewhere far across the valley.",
  };
  return bank;
}

const std::vector<std::string>& key_adjectives() {
  static const std::vector<std::string> v{"amber", "brisk", "cobalt", "dusky", "eager", "frosty", "gilded", "hollow",
                                          "ivory", "jolly", "keen", "lunar", "mossy", "noble", "opal", "proud",
                                          "quartz", "rustic", "silent", "tawny", "umber", "velvet", "wild", "zesty"};
  return v;
}

const std::vector<std::string>& key_nouns() {
  static const std::vector<std::string> v{"falcon", "harbor", "lantern", "meadow", "otter", "pebble", "quill",
                                          "raven", "spire", "thistle", "walnut", "willow", "badger", "comet",
                                          "dune", "ember", "fjord", "glacier", "heron", "iris", "juniper", "kestrel"};
  return v;
}

std::vector<std::string> unique_keys(std::size_t n, Rng& rng) {
  const auto& adj = key_adjectives();
  const auto& noun = key_nouns();
  if (n > adj.size() * noun.size()) throw DataError("too many keys requested");
  std::set<std::string> seen;
  std::vector<std::string> keys;
  while (keys.size() < n) {
    auto k = adj[rng.below(adj.size())] + "-" + noun[rng.below(noun.size())];
    if (seen.insert(k).second) keys.push_back(std::move(k));
  }
  return keys;
}

std::vector<std::string> unique_numbers(std::size_t n, std::size_t digits, Rng& rng) {
  std::uint64_t lo = 1;
  for (std::size_t i = 1; i < digits; ++i) lo *= 10;
  std::set<std::uint64_t> seen;
  std::vector<std::string> out;
  while (out.size() < n) {
    const auto x = lo + rng.below(9 * lo);
    if (seen.insert(x).second) out.push_back(std::to_string(x));
  }
  return out;
}

// Filler sentences in seeded shuffled order, cycling through the bank.
class FillerStream {
 public:
  explicit FillerStream(Rng& rng) : rng_(rng) { refill(); }
  const std::string& next() {
    if (pos_ == order_.size()) refill();
    return sentence_bank()[order_[pos_++]];
  }

 private:
  void refill() {
    order_.resize(sentence_bank().size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    shuffle(order_.begin(), order_.end(), rng_);
    pos_ = 0;
  }
  Rng& rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

// Whole filler sentences, the last one cut so the total is exactly `chars` bytes.
std::vector<std::string> filler_pieces(std::size_t chars, Rng& rng) {
  FillerStream stream(rng);
  std::vector<std::string> pieces;
  std::size_t used = 0;
  while (used < chars) {
    std::string s = stream.next() + " ";
    if (used + s.size() > chars) s.resize(chars - used);
    used += s.size();
    pieces.push_back(std::move(s));
  }
  return pieces;
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

json meta_to_json(const TaskMeta& m) {
  return json{{"task", m.task}, {"keys", m.keys}, {"values", m.values}, {"context_length", m.context_length}};
}

}  // namespace

std::vector<int> encode(std::string_view text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(c);
  return ids;
}

std::string decode(const std::vector<int>& ids) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= kVocabSize) throw DataError("decode: token id " + std::to_string(id) + " outside vocabulary");
    if (id < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

std::vector<TokenSequence> split_windows(const std::vector<int>& ids, std::size_t max_seq_len, std::size_t stride) {
  if (max_seq_len == 0) throw DataError("max_seq_len must be ≥ 1");
  if (stride == 0) throw DataError("stride must be ≥ 1");
  std::vector<TokenSequence> out;
  if (ids.empty()) return out;
  for (std::size_t start = 0;; start += stride) {
    const std::size_t end = std::min(ids.size(), start + max_seq_len);
    out.push_back(TokenSequence{std::vector<int>(ids.begin() + static_cast<long>(start), ids.begin() + static_cast<long>(end)),
                                std::nullopt});
    if (end == ids.size()) break;
  }
  return out;
}

std::vector<TokenSequence> load_corpus(const std::filesystem::path& path, std::size_t max_seq_len,
                                       std::size_t stride) {
  std::ifstream in(path);
  if (!in) throw DataError("load_corpus: cannot open " + path.string());
  std::vector<TokenSequence> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": malformed JSON (" + e.what() + ")");
    }
    if (!rec.is_object() || !rec.contains("text") || !rec["text"].is_string()) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected an object with a string \"text\" field");
    }
    auto windows = split_windows(encode(rec["text"].get<std::string>()), max_seq_len, stride);
    out.insert(out.end(), std::make_move_iterator(windows.begin()), std::make_move_iterator(windows.end()));
  }
  return out;
}

TaskSample gen_niah(std::size_t haystack_len, std::size_t n_needles, std::size_t n_queries, std::uint64_t seed) {
  if (haystack_len < 64) throw DataError("gen_niah: haystack_len must be ≥ 64 tokens");
  if (n_needles < 1 || n_queries < 1) throw DataError("gen_niah: n_needles and n_queries must be ≥ 1");
  if (n_queries > n_needles) throw DataError("gen_niah: n_queries must not exceed n_needles");
  Rng rng(seed);
  const auto keys = unique_keys(n_needles, rng);
  const auto values = unique_numbers(n_needles, 6, rng);

  std::vector<std::size_t> order(n_needles);
  for (std::size_t i = 0; i < n_needles; ++i) order[i] = i;
  shuffle(order.begin(), order.end(), rng);
  order.resize(n_queries);

  TaskMeta meta{"niah", {}, {}, haystack_len};
  for (auto i : order) {
    meta.keys.push_back(keys[i]);
    meta.values.push_back(values[i]);
  }
  const std::string query = n_queries == 1
                                ? "What is the magic number for " + meta.keys[0] + "? Answer: "
                                : "What are the magic numbers for " + join(meta.keys, ", ") + "? Answer: ";
  std::vector<std::string> needles;
  std::size_t needle_chars = 0;
  for (std::size_t i = 0; i < n_needles; ++i) {
    needles.push_back("The magic number for " + keys[i] + " is " + values[i] + ". ");
    needle_chars += needles.back().size();
  }
  if (needle_chars + query.size() + 1 > haystack_len) {
    throw DataError("gen_niah: haystack_len " + std::to_string(haystack_len) + " too small for " +
                    std::to_string(n_needles) + " needles and the query (need > " +
                    std::to_string(needle_chars + query.size()) + ")");
  }
  auto pieces = filler_pieces(haystack_len - needle_chars - query.size(), rng);
  // Needles go in front of seeded filler pieces; the cut final piece stays last.
  std::vector<std::size_t> slots(n_needles);
  for (auto& s : slots) s = rng.below(pieces.size());
  std::sort(slots.begin(), slots.end());
  std::string prompt;
  for (std::size_t p = 0, n = 0; p < pieces.size(); ++p) {
    while (n < n_needles && slots[n] == p) prompt += needles[n++];
    prompt += pieces[p];
  }
  prompt += query;
  return TaskSample{std::move(prompt), join(meta.values, ", "), std::move(meta)};
}

TaskSample gen_copy_task(std::size_t key_len, std::size_t payload_len, std::size_t distractors, std::uint64_t seed) {
  if (key_len < 1 || payload_len < 1) throw DataError("gen_copy_task: key_len and payload_len must be ≥ 1");
  Rng rng(seed);
  const std::size_t n = distractors + 1;
  static const std::string key_chars = "abcdefghijklmnopqrstuvwxyz";
  static const std::string payload_chars = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
  std::set<std::string> seen;
  std::vector<std::string> keys, payloads;
  std::size_t guard = 0;
  while (keys.size() < n) {
    std::string k;
    for (std::size_t i = 0; i < key_len; ++i) k.push_back(key_chars[rng.below(key_chars.size())]);
    if (seen.insert(k).second) {
      keys.push_back(std::move(k));
    } else if (++guard > 100000) {
      throw DataError("gen_copy_task: cannot draw " + std::to_string(n) + " distinct keys of length " +
                      std::to_string(key_len));
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    std::string p;
    for (std::size_t i = 0; i < payload_len; ++i) p.push_back(payload_chars[rng.below(payload_chars.size())]);
    payloads.push_back(std::move(p));
  }
  const std::size_t target = rng.below(n);
  std::string prompt;
  for (std::size_t j = 0; j < n; ++j) prompt += "key " + keys[j] + ": " + payloads[j] + "\n";
  prompt += "Repeat the payload for key " + keys[target] + ": ";
  TaskMeta meta{"copy", {keys[target]}, {payloads[target]}, 0};
  meta.context_length = prompt.size();
  return TaskSample{std::move(prompt), payloads[target], std::move(meta)};
}

std::vector<std::string> gen_corpus(std::size_t n_texts, std::size_t text_len, std::uint64_t seed) {
  if (text_len < 1) throw DataError("gen_corpus: text_len must be ≥ 1");
  std::vector<std::string> texts;
  for (std::size_t i = 0; i < n_texts; ++i) {
    Rng rng(Rng::derive(seed, {i}));
    FillerStream filler(rng);
    const auto keys = unique_keys(3, rng);
    const auto values = unique_numbers(3, 4, rng);
    std::string text;
    std::size_t fact = 0, recall = 0;
    while (text.size() < text_len) {
      const double u = rng.uniform();
      if (fact < keys.size() && u < 0.35) {
        text += "The code for " + keys[fact] + " is " + values[fact] + ". ";
        ++fact;
      } else if (recall < fact && u < 0.6) {
        text += "Again, the code for " + keys[recall] + " is " + values[recall] + ". ";
        ++recall;
      } else {
        text += filler.next() + " ";
      }
    }
    text.resize(text_len);
    texts.push_back(std::move(text));
  }
  return texts;
}

void write_tasks(const std::filesystem::path& path, const std::vector<TaskSample>& tasks) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("write_tasks: cannot open " + path.string());
  for (const auto& t : tasks) {
    out << json{{"prompt", t.prompt}, {"answer", t.answer}, {"meta", meta_to_json(t.meta)}}.dump() << "\n";
  }
}

std::vector<TaskSample> read_tasks(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("read_tasks: cannot open " + path.string());
  std::vector<TaskSample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto rec = json::parse(line);
      TaskSample t;
      t.prompt = rec.at("prompt").get<std::string>();
      t.answer = rec.at("answer").get<std::string>();
      if (rec.contains("meta")) {
        const auto& m = rec["meta"];
        t.meta.task = m.value("task", "");
        t.meta.keys = m.value("keys", std::vector<std::string>{});
        t.meta.values = m.value("values", std::vector<std::string>{});
        t.meta.context_length = m.value("context_length", std::size_t{0});
      }
      if (t.answer.empty()) throw DataError("empty answer");
      out.push_back(std::move(t));
    } catch (const std::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": bad task record (" + e.what() + ")");
    }
  }
  return out;
}

void write_corpus(const std::filesystem::path& path, const std::vector<std::string>& texts) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("write_corpus: cannot open " + path.string());
  for (const auto& t : texts) out << json{{"text", t}}.dump() << "\n";
}

}  // namespace refine
