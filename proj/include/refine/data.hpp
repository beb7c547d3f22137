#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace refine {

// Byte-level vocabulary: ids 0..255 are raw bytes, followed by two specials.
inline constexpr int kBosToken = 256;
inline constexpr int kPadToken = 257;
inline constexpr int kVocabSize = 258;

struct TokenSequence {
  std::vector<int> ids;
  // When set, [0, prompt_len) is the prompt span and the rest is the response.
  std::optional<std::size_t> prompt_len;

  std::size_t size() const { return ids.size(); }
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<int> encode(std::string_view text);
// Specials decode to nothing; ids outside the vocabulary throw.
std::string decode(const std::vector<int>& ids);

// Reads JSONL records {"text": ...}, tokenizes each text and cuts it into
// windows of at most max_seq_len tokens starting every `stride` tokens.
std::vector<TokenSequence> load_corpus(const std::filesystem::path& path, std::size_t max_seq_len,
                                       std::size_t stride);
std::vector<TokenSequence> split_windows(const std::vector<int>& ids, std::size_t max_seq_len, std::size_t stride);

struct TaskMeta {
  std::string task;                 // "niah" or "copy"
  std::vector<std::string> keys;    // queried keys, in answer order
  std::vector<std::string> values;  // their values (needles / payload)
  std::size_t context_length = 0;   // requested prompt length in tokens
};

struct TaskSample {
  std::string prompt;
  std::string answer;
  TaskMeta meta;
};

// Needle-in-a-haystack prompt of exactly `haystack_len` tokens: filler sentences
// with "The magic number for <key> is <value>." needles at seeded positions and
// a closing query for `n_queries` of the keys.
TaskSample gen_niah(std::size_t haystack_len, std::size_t n_needles, std::size_t n_queries, std::uint64_t seed);

// Keyed payload lines followed by a request to reproduce one payload.
TaskSample gen_copy_task(std::size_t key_len, std::size_t payload_len, std::size_t distractors, std::uint64_t seed);

// Synthetic training text: filler prose interleaved with key/value facts that
// are restated later in the same sequence, so recalling context pays off.
std::vector<std::string> gen_corpus(std::size_t n_texts, std::size_t text_len, std::uint64_t seed);

void write_tasks(const std::filesystem::path& path, const std::vector<TaskSample>& tasks);
std::vector<TaskSample> read_tasks(const std::filesystem::path& path);
void write_corpus(const std::filesystem::path& path, const std::vector<std::string>& texts);

}  // namespace refine
