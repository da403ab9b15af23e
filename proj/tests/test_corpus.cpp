#include "mscqg/corpus.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace mscqg;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "mscqg_test_corpus";
  std::filesystem::create_directories(dir);
  return dir / name;
}

void write_text(const std::filesystem::path& p, const std::string& content) {
  std::ofstream out(p);
  out << content;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("vocabulary orders by frequency then lexicographically") {
  const std::vector<std::string> texts = {"a b", "b c"};
  auto v = Vocabulary::build(texts, 6);
  CHECK(v.size() == 6);
  CHECK(v.id("b") == 4);
  CHECK(v.id("a") == 5);
  CHECK(v.id("c") == kUnk);  // only two slots after the specials

  auto v7 = Vocabulary::build(texts, 7);
  CHECK(v7.id("b") == 4);
  CHECK(v7.id("a") == 5);
  CHECK(v7.id("c") == 6);
}

TEST_CASE("vocabulary of capacity four maps every word to UNK") {
  const std::vector<std::string> texts = {"x"};
  auto v = Vocabulary::build(texts, 4);
  CHECK(v.size() == 4);
  CHECK(v.id("x") == kUnk);
}

TEST_CASE("vocabulary construction is deterministic and rejects empty input") {
  const std::vector<std::string> texts = {"the cat sat", "on the mat", "cat and dog"};
  CHECK(Vocabulary::build(texts, 20) == Vocabulary::build(texts, 20));
  CHECK_THROWS_AS(Vocabulary::build(std::vector<std::string>{}, 10), DatasetError);
  CHECK_THROWS_AS(Vocabulary::build(texts, 3), DatasetError);
}

TEST_CASE("specials are never produced by corpus text") {
  const std::vector<std::string> texts = {"<sep> <eos> <unk> <pad> word"};
  auto v = Vocabulary::build(texts, 50);
  for (const auto& w : v.regular_words()) CHECK(w.find('<') == std::string::npos);
  CHECK(v.id("sep") >= 4);
}

TEST_CASE("tokenize lowercases, splits on punctuation and maps OOV to UNK") {
  const std::vector<std::string> texts = {"how many moons"};
  auto v = Vocabulary::build(texts, 10);
  auto ids = tokenize("How many MOONS?", v);
  REQUIRE(ids.size() == 3);
  CHECK(v.word(ids[0]) == "how");
  CHECK(v.word(ids[1]) == "many");
  CHECK(v.word(ids[2]) == "moons");
  CHECK(tokenize("saturn", v) == std::vector<TokenId>{kUnk});
  CHECK(tokenize("", v).empty());
  CHECK(detokenize(tokenize("How, many   moons!", v), v) == "how many moons");
}

TEST_CASE("load_dataset reads well-formed lines") {
  auto path = temp_file("two.jsonl");
  write_text(path,
             R"({"id":"i1","positive_docs":[{"id":"a","text":"alpha beta"}],"negative_docs":[{"id":"b","text":"gamma"}],"oracle_pos_question":"what alpha","oracle_neg_question":null})"
             "\n"
             R"({"id":"i2","positive_docs":[{"id":"c","text":"delta"}],"negative_docs":[],"oracle_pos_question":null,"oracle_neg_question":null})"
             "\n");
  auto data = load_dataset(path);
  REQUIRE(data.size() == 2);
  CHECK(data[0].oracle_pos_question == std::optional<std::string>("what alpha"));
  CHECK_FALSE(data[0].oracle_neg_question.has_value());
  CHECK(data[1].negative_docs.empty());
}

TEST_CASE("load_dataset reports the missing field and line number") {
  auto path = temp_file("missing.jsonl");
  write_text(path, R"({"id":"i1","positive_docs":[{"id":"a","text":"x"}],"negative_docs":[]})"
                   "\n"
                   R"({"id":"i2","negative_docs":[]})"
                   "\n");
  try {
    load_dataset(path);
    FAIL("expected a schema error");
  } catch (const DatasetError& e) {
    const std::string msg = e.what();
    CHECK(msg.find(":2:") != std::string::npos);
    CHECK(msg.find("positive_docs") != std::string::npos);
  }
}

TEST_CASE("load_dataset rejects overlapping sets, duplicates and malformed JSON") {
  auto overlap = temp_file("overlap.jsonl");
  write_text(overlap,
             R"({"id":"i1","positive_docs":[{"id":"a","text":"x"}],"negative_docs":[{"id":"a","text":"y"}]})"
             "\n");
  CHECK_THROWS_WITH_AS(load_dataset(overlap), doctest::Contains("overlap"), DatasetError);

  auto dup = temp_file("dup.jsonl");
  write_text(dup,
             R"({"id":"i1","positive_docs":[{"id":"a","text":"x"}],"negative_docs":[]})"
             "\n"
             R"({"id":"i1","positive_docs":[{"id":"b","text":"x"}],"negative_docs":[]})"
             "\n");
  CHECK_THROWS_WITH_AS(load_dataset(dup), doctest::Contains("duplicate"), DatasetError);

  auto bad = temp_file("bad.jsonl");
  write_text(bad, "{not json\n");
  CHECK_THROWS_WITH_AS(load_dataset(bad), doctest::Contains(":1:"), DatasetError);
}

TEST_CASE("synthetic generation counts, ids and determinism") {
  SyntheticSpec spec;
  spec.num_pairs = 40;
  spec.docs_per_set = 10;
  auto a = generate_synthetic(spec);
  REQUIRE(a.instances.size() == 40);
  std::set<std::string> ids;
  std::size_t docs = 0;
  for (const auto& inst : a.instances) {
    for (const auto& d : inst.positive_docs) ids.insert(d.id), ++docs;
    for (const auto& d : inst.negative_docs) ids.insert(d.id), ++docs;
  }
  CHECK(docs == 800);
  CHECK(ids.size() == 800);

  auto p1 = temp_file("synth1.jsonl"), p2 = temp_file("synth2.jsonl");
  write_dataset(p1, a.instances);
  write_dataset(p2, generate_synthetic(spec).instances);
  CHECK(slurp(p1) == slurp(p2));
}

TEST_CASE("synthetic overlap 0 gives keyword-disjoint sets") {
  SyntheticSpec spec;
  spec.num_pairs = 5;
  spec.overlap = 0.0;
  const std::vector<std::string> template_text = {
      "what is the of and a can make in there are with this has for they use to find from near some"};
  const auto fn = normalize_words(template_text[0]);
  const std::set<std::string> function_words(fn.begin(), fn.end());
  for (const auto& inst : generate_synthetic(spec).instances) {
    std::set<std::string> pos, neg;
    for (const auto& d : inst.positive_docs) {
      for (auto& w : normalize_words(d.text)) {
        if (!function_words.contains(w)) pos.insert(w);
      }
    }
    for (const auto& d : inst.negative_docs) {
      for (auto& w : normalize_words(d.text)) {
        if (!function_words.contains(w)) neg.insert(w);
      }
    }
    for (const auto& w : pos) CHECK_FALSE(neg.contains(w));
  }
}

TEST_CASE("synthetic oracle questions are answerable from the positive set") {
  SyntheticSpec spec;
  spec.num_pairs = 20;
  for (std::size_t docs : {1, 2, 10}) {
    spec.docs_per_set = docs;
    for (const auto& inst : generate_synthetic(spec).instances) {
      std::set<std::string> words;
      for (const auto& d : inst.positive_docs) {
        for (auto& w : normalize_words(d.text)) words.insert(w);
      }
      REQUIRE(inst.oracle_pos_question.has_value());
      for (const auto& w : normalize_words(*inst.oracle_pos_question)) CHECK(words.contains(w));
    }
  }
}

TEST_CASE("synthetic generation validates the overlap fraction") {
  SyntheticSpec spec;
  spec.overlap = 1.5;
  CHECK_THROWS_AS(generate_synthetic(spec), DatasetError);
  spec.overlap = -0.1;
  CHECK_THROWS_AS(generate_synthetic(spec), DatasetError);
}

TEST_CASE("write then load is the identity") {
  SyntheticSpec spec;
  spec.num_pairs = 6;
  spec.seed = 11;
  auto data = generate_synthetic(spec);
  auto path = temp_file("roundtrip.jsonl");
  write_dataset(path, data.instances);
  CHECK(load_dataset(path) == data.instances);

  auto qpath = temp_file("questions.jsonl");
  write_questions(qpath, data.questions);
  CHECK(load_questions(qpath) == data.questions);
}
