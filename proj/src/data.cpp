#include "ega/data.hpp"

#include "ega/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

namespace ega {

namespace {

std::string describe(char32_t c) {
  std::ostringstream os;
  os << "'" << encode_utf8(std::u32string(1, c)) << "' (U+" << std::hex << std::uppercase
     << static_cast<std::uint32_t>(c) << ")";
  return os.str();
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus file " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for " + path.string());
  return bytes;
}

}  // namespace

std::u32string decode_utf8(const std::string& bytes) {
  std::u32string out;
  out.reserve(bytes.size());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t n = bytes.size();
  for (std::size_t i = 0; i < n;) {
    const unsigned char b = p[i];
    std::size_t len = 0;
    char32_t cp = 0;
    if (b < 0x80) {
      len = 1;
      cp = b;
    } else if ((b & 0xE0) == 0xC0) {
      len = 2;
      cp = b & 0x1F;
    } else if ((b & 0xF0) == 0xE0) {
      len = 3;
      cp = b & 0x0F;
    } else if ((b & 0xF8) == 0xF0) {
      len = 4;
      cp = b & 0x07;
    }
    bool ok = len > 0 && i + len <= n;
    for (std::size_t k = 1; ok && k < len; ++k) {
      if ((p[i + k] & 0xC0) != 0x80) ok = false;
      cp = (cp << 6) | (p[i + k] & 0x3F);
    }
    static constexpr char32_t kMin[] = {0, 0, 0x80, 0x800, 0x10000};
    if (ok && (cp < kMin[len] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF))) ok = false;
    if (ok) {
      out.push_back(cp);
      i += len;
    } else {
      out.push_back(b);
      ++i;
    }
  }
  return out;
}

std::string encode_utf8(const std::u32string& text) {
  std::string out;
  out.reserve(text.size());
  for (char32_t c : text) {
    if (c < 0x80) {
      out.push_back(static_cast<char>(c));
    } else if (c < 0x800) {
      out.push_back(static_cast<char>(0xC0 | (c >> 6)));
      out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
    } else if (c < 0x10000) {
      out.push_back(static_cast<char>(0xE0 | (c >> 12)));
      out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
    } else {
      out.push_back(static_cast<char>(0xF0 | (c >> 18)));
      out.push_back(static_cast<char>(0x80 | ((c >> 12) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
    }
  }
  return out;
}

Vocab::Vocab(const std::u32string& text) : chars_(text) {
  std::sort(chars_.begin(), chars_.end());
  chars_.erase(std::unique(chars_.begin(), chars_.end()), chars_.end());
  for (std::size_t i = 0; i < chars_.size(); ++i) index_[chars_[i]] = static_cast<std::int32_t>(i);
}

std::vector<std::int32_t> Vocab::encode(const std::u32string& text) const {
  std::vector<std::int32_t> ids;
  ids.reserve(text.size());
  for (char32_t c : text) {
    const auto it = index_.find(c);
    if (it == index_.end()) throw VocabularyError("character " + describe(c) + " is not in the vocabulary");
    ids.push_back(it->second);
  }
  return ids;
}

std::vector<std::int32_t> Vocab::encode(const std::string& utf8) const { return encode(decode_utf8(utf8)); }

std::string Vocab::decode(const std::vector<std::int32_t>& ids) const {
  std::u32string text;
  text.reserve(ids.size());
  for (std::int32_t id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= chars_.size()) {
      throw VocabularyError("id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(chars_.size()));
    }
    text.push_back(chars_[static_cast<std::size_t>(id)]);
  }
  return encode_utf8(text);
}

Corpus corpus_from_text(const std::string& utf8, const std::string& name, double split_ratio) {
  if (!(split_ratio > 0.0 && split_ratio < 1.0)) throw ContractError("split ratio must lie in (0, 1)");
  Corpus c;
  c.name = name;
  c.text = decode_utf8(utf8);
  if (c.text.empty()) throw ContractError("corpus '" + name + "' is empty");
  c.vocab = Vocab(c.text);
  const std::vector<std::int32_t> ids = c.vocab.encode(c.text);
  const auto n_train =
      static_cast<std::size_t>(std::floor(split_ratio * static_cast<double>(ids.size())));
  c.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  c.val.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.end());
  return c;
}

Corpus load_corpus(const std::filesystem::path& path, const std::string& name, double split_ratio) {
  std::error_code ec;
  if (std::filesystem::is_directory(path, ec)) {
    const auto train_path = path / (name + ".train.txt");
    const auto val_path = path / (name + ".valid.txt");
    if (!std::filesystem::exists(train_path)) throw IoError("missing " + train_path.string());
    if (!std::filesystem::exists(val_path)) throw IoError("missing " + val_path.string());
    const std::u32string train = decode_utf8(read_file(train_path));
    const std::u32string val = decode_utf8(read_file(val_path));
    if (train.empty() || val.empty()) throw ContractError("corpus '" + name + "' has an empty split");
    Corpus c;
    c.name = name;
    c.text = train + val;
    c.vocab = Vocab(c.text);
    c.train = c.vocab.encode(train);
    c.val = c.vocab.encode(val);
    return c;
  }
  if (!std::filesystem::exists(path, ec)) throw IoError("corpus file not found: " + path.string());
  return corpus_from_text(read_file(path), name, split_ratio);
}

Batch sample_batch(const Corpus& corpus, Split split, std::size_t context, std::size_t batch, std::uint64_t seed,
                   std::uint64_t step) {
  return sample_batch(corpus, split, context, batch, seed, step,
                      split == Split::kTrain ? Stream::kTrainBatch : Stream::kEvalBatch);
}

Batch sample_batch(const Corpus& corpus, Split split, std::size_t context, std::size_t batch, std::uint64_t seed,
                   std::uint64_t step, Stream stream) {
  const std::vector<std::int32_t>& ids = corpus.split(split);
  if (context == 0 || batch == 0) throw ContractError("sample_batch: context and batch must be positive");
  if (context >= ids.size()) {
    throw ContractError("sample_batch: context " + std::to_string(context) + " needs a split longer than " +
                        std::to_string(ids.size()) + " tokens");
  }
  const std::uint64_t span = ids.size() - context;
  Batch out{{{batch, context}, std::vector<std::int32_t>(batch * context)},
            {{batch, context}, std::vector<std::int32_t>(batch * context)}};
  for (std::size_t b = 0; b < batch; ++b) {
    const std::uint64_t off = counter_hash(seed, static_cast<std::uint64_t>(stream), step, b) % span;
    std::copy_n(ids.begin() + static_cast<std::ptrdiff_t>(off), context, out.inputs.ids.begin() + b * context);
    std::copy_n(ids.begin() + static_cast<std::ptrdiff_t>(off + 1), context, out.targets.ids.begin() + b * context);
  }
  return out;
}

std::uint64_t batch_fingerprint(const Corpus& corpus, std::uint64_t seed, std::uint64_t n_steps, std::size_t context,
                                std::size_t batch) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint64_t step = 0; step < n_steps; ++step) {
    const Batch b = sample_batch(corpus, Split::kTrain, context, batch, seed, step);
    for (std::int32_t id : b.inputs.ids) {
      const auto u = static_cast<std::uint32_t>(id);
      const unsigned char le[4] = {static_cast<unsigned char>(u), static_cast<unsigned char>(u >> 8),
                                   static_cast<unsigned char>(u >> 16), static_cast<unsigned char>(u >> 24)};
      h = fnv1a(le, 4, h);
    }
  }
  return h;
}

}  // namespace ega
