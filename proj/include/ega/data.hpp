#pragma once

#include "ega/ops.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace ega {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Split { kTrain, kVal };

/// Character vocabulary sorted by code point.
class Vocab {
 public:
  Vocab() = default;
  explicit Vocab(const std::u32string& text);

  std::size_t size() const { return chars_.size(); }
  const std::u32string& chars() const { return chars_; }

  /// Throws VocabularyError naming the first unknown character.
  std::vector<std::int32_t> encode(const std::string& utf8) const;
  std::vector<std::int32_t> encode(const std::u32string& text) const;
  /// Throws VocabularyError on an id outside [0, size).
  std::string decode(const std::vector<std::int32_t>& ids) const;

 private:
  std::u32string chars_;
  std::unordered_map<char32_t, std::int32_t> index_;
};

struct Corpus {
  std::string name;
  std::u32string text;
  std::vector<std::int32_t> train;
  std::vector<std::int32_t> val;
  Vocab vocab;

  const std::vector<std::int32_t>& split(Split s) const { return s == Split::kTrain ? train : val; }
};

/// Decodes UTF-8; a byte that does not start a valid sequence is taken as Latin-1.
std::u32string decode_utf8(const std::string& bytes);
std::string encode_utf8(const std::u32string& text);

/// train = first floor(ratio * N) characters, val = the rest, vocabulary over the whole text.
Corpus corpus_from_text(const std::string& utf8, const std::string& name, double split_ratio = 0.9);

/// A regular file is split by ratio. A directory holding `<name>.train.txt` and
/// `<name>.valid.txt` (the PTB layout) keeps its given split.
Corpus load_corpus(const std::filesystem::path& path, const std::string& name, double split_ratio = 0.9);

struct Batch {
  TokenArray inputs;   // [B, T]
  TokenArray targets;  // [B, T], inputs shifted by one
};

/// Offsets come from counter_hash(seed, stream, step, slot), independent of any model state.
/// The train split draws from the train-batch stream, the val split from the eval stream.
Batch sample_batch(const Corpus& corpus, Split split, std::size_t context, std::size_t batch, std::uint64_t seed,
                   std::uint64_t step);
/// Same draw from an explicit stream; evaluation uses this to keep fixed batches on either split.
Batch sample_batch(const Corpus& corpus, Split split, std::size_t context, std::size_t batch, std::uint64_t seed,
                   std::uint64_t step, Stream stream);

/// FNV-1a over the little-endian input ids of the first n_steps train batches.
std::uint64_t batch_fingerprint(const Corpus& corpus, std::uint64_t seed, std::uint64_t n_steps,
                                std::size_t context = 256, std::size_t batch = 64);

}  // namespace ega
