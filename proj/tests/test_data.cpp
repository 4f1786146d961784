#include "ega/data.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>

using namespace ega;
namespace fs = std::filesystem;

namespace {

std::string repeat(const std::string& s, std::size_t n) {
  std::string out;
  for (std::size_t i = 0; i < n; ++i) out += s;
  return out;
}

Corpus text_corpus() {
  std::string text;
  for (int i = 0; i < 400; ++i) text += "To be or not to be, that is the question " + std::to_string(i) + "\n";
  return corpus_from_text(text, "probe");
}

fs::path temp_file(const std::string& name, const std::string& contents) {
  const fs::path p = fs::temp_directory_path() / name;
  std::ofstream(p, std::ios::binary) << contents;
  return p;
}

}  // namespace

TEST(Corpus, RatioSplitExample) {
  const Corpus c = corpus_from_text(repeat("abc", 20), "abc", 0.9);
  EXPECT_EQ(c.train.size(), 54u);
  EXPECT_EQ(c.val.size(), 6u);
  EXPECT_EQ(c.vocab.chars(), U"abc");
  EXPECT_EQ(c.train[0], 0);
  EXPECT_EQ(c.val.back(), 2);
}

TEST(Corpus, LoadErrors) {
  try {
    load_corpus("/nonexistent/shakespeare.txt", "shakespeare");
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/shakespeare.txt"), std::string::npos);
  }
  EXPECT_THROW(load_corpus(temp_file("ega_empty.txt", ""), "empty"), ContractError);
  EXPECT_THROW(corpus_from_text("abc", "x", 1.0), ContractError);
}

TEST(Corpus, LoadsFileAndDirectoryLayouts) {
  const Corpus f = load_corpus(temp_file("ega_small.txt", repeat("hello world\n", 10)), "small", 0.5);
  EXPECT_EQ(f.train.size(), 60u);
  EXPECT_EQ(f.vocab.size(), 9u);

  const fs::path dir = fs::temp_directory_path() / "ega_ptb_layout";
  fs::create_directories(dir);
  std::ofstream(dir / "ptb.train.txt") << " the cat <unk> sat\n";
  std::ofstream(dir / "ptb.valid.txt") << " a dog 9\n";
  const Corpus p = load_corpus(dir, "ptb");
  EXPECT_EQ(p.train.size(), 19u);
  EXPECT_EQ(p.val.size(), 9u);
  EXPECT_EQ(p.vocab.decode(p.val), " a dog 9\n");
}

TEST(Vocab, RoundTripAndSortedOrder) {
  const Corpus c = text_corpus();
  const std::string s = "To be or not to be";
  EXPECT_EQ(c.vocab.decode(c.vocab.encode(s)), s);
  EXPECT_TRUE(c.vocab.encode(std::string()).empty());
  EXPECT_TRUE(std::is_sorted(c.vocab.chars().begin(), c.vocab.chars().end()));
  EXPECT_EQ(c.vocab.chars().front(), U'\n');
  for (std::int32_t id : c.train) EXPECT_LT(static_cast<std::size_t>(id), c.vocab.size());
}

TEST(Vocab, Errors) {
  const Corpus c = text_corpus();
  try {
    c.vocab.encode(std::string("zebra"));
    FAIL() << "expected VocabularyError";
  } catch (const VocabularyError& e) {
    EXPECT_NE(std::string(e.what()).find("'z'"), std::string::npos);
  }
  EXPECT_THROW(c.vocab.decode({0, static_cast<std::int32_t>(c.vocab.size())}), VocabularyError);
  EXPECT_THROW(c.vocab.decode({-1}), VocabularyError);
}

TEST(Vocab, Utf8CodePoints) {
  const Corpus c = corpus_from_text("naïve café ✓ naïve café ✓", "u");
  EXPECT_EQ(c.text.size(), 25u);
  EXPECT_EQ(c.vocab.decode(c.vocab.encode(std::string("café ✓"))), "café ✓");
  // a stray continuation byte falls back to its Latin-1 reading
  EXPECT_EQ(decode_utf8("a\x80z"), (std::u32string{U'a', char32_t{0x80}, U'z'}));
}

TEST(SampleBatch, TargetsAreShiftedInputs) {
  const Corpus c = text_corpus();
  const Batch b = sample_batch(c, Split::kTrain, 32, 8, 1337, 5);
  EXPECT_EQ(b.inputs.shape, (Shape{8, 32}));
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t t = 0; t + 1 < 32; ++t) EXPECT_EQ(b.targets.ids[r * 32 + t], b.inputs.ids[r * 32 + t + 1]);
}

TEST(SampleBatch, PureFunctionOfSeedAndStep) {
  const Corpus c = text_corpus();
  const Batch a = sample_batch(c, Split::kTrain, 16, 4, 7, 3);
  const Batch b = sample_batch(c, Split::kTrain, 16, 4, 7, 3);
  EXPECT_EQ(a.inputs.ids, b.inputs.ids);
  EXPECT_NE(sample_batch(c, Split::kTrain, 16, 4, 7, 4).inputs.ids, a.inputs.ids);
  EXPECT_NE(sample_batch(c, Split::kVal, 16, 4, 7, 3).inputs.ids, a.inputs.ids);
}

TEST(SampleBatch, StepsRarelyCollide) {
  // random letters so that distinct offsets give distinct windows
  Rng rng(17, Stream::kTest);
  std::string text(20000, ' ');
  for (char& ch : text) ch = static_cast<char>('a' + rng.below(26));
  const Corpus c = corpus_from_text(text, "random");
  std::set<std::vector<std::int32_t>> seen;
  for (std::uint64_t step = 0; step < 1000; ++step) seen.insert(sample_batch(c, Split::kTrain, 8, 1, 3, step).inputs.ids);
  // 18k start offsets: 1000 draws expect ~28 birthday collisions
  EXPECT_GT(seen.size(), 950u);
}

TEST(SampleBatch, ContextMustFitTheSplit) {
  const Corpus c = corpus_from_text(repeat("abc", 20), "abc", 0.9);
  EXPECT_THROW(sample_batch(c, Split::kVal, 6, 1, 1, 0), ContractError);
  EXPECT_NO_THROW(sample_batch(c, Split::kVal, 5, 1, 1, 0));
}

TEST(BatchFingerprint, SeedSensitiveAndRepeatable) {
  const Corpus c = text_corpus();
  EXPECT_EQ(batch_fingerprint(c, 1, 20, 32, 4), batch_fingerprint(c, 1, 20, 32, 4));
  EXPECT_NE(batch_fingerprint(c, 1, 20, 32, 4), batch_fingerprint(c, 2, 20, 32, 4));
}

// The published corpora are not bundled; point EGA_DATA_DIR at a directory holding
// tinyshakespeare.txt and ptb.train.txt / ptb.valid.txt to run these.
TEST(PublishedCorpora, VocabularySizes) {
  const char* dir = std::getenv("EGA_DATA_DIR");
  if (dir == nullptr) GTEST_SKIP() << "EGA_DATA_DIR not set";
  const fs::path root(dir);
  if (fs::exists(root / "tinyshakespeare.txt")) {
    EXPECT_EQ(load_corpus(root / "tinyshakespeare.txt", "shakespeare").vocab.size(), 65u);
  }
  if (fs::exists(root / "ptb.train.txt")) {
    EXPECT_EQ(load_corpus(root, "ptb").vocab.size(), 50u);
  }
}
