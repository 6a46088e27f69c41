#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <set>

#include "editproc/edit_ops.hpp"
#include "support/oracles.hpp"

using namespace editproc;
using editproc::testing::levenshtein_distance;
using editproc::testing::random_tokens;

namespace {

Tokens toks(std::initializer_list<TokenId> ids) { return Tokens(ids); }

}  // namespace

TEST_CASE("identity diff is all KEEP") {
  Tokens x = toks({10, 11, 12});
  EditScript s = diff(x, x);
  REQUIRE(s.tag_string() == "KKKK");
  REQUIRE(s.insertions.empty());
  REQUIRE(s.replacements.empty());
  REQUIRE(is_identity(s));
  REQUIRE(apply_script(x, s) == x);
}

TEST_CASE("contiguous replacement gets one run with full new content") {
  // Two source tokens replaced by a three-token span: both carry REPLACE and
  // the run holds the whole new content.
  Tokens src = toks({1, 2});
  Tokens tgt = toks({3, 4, 5});
  EditScript s = diff(src, tgt);
  REQUIRE(s.tag_string() == "KRR");
  REQUIRE(s.replacements.size() == 1);
  REQUIRE(s.replacements.at(1) == tgt);
  REQUIRE(s.insertions.empty());
  REQUIRE(apply_script(src, s) == tgt);
}

TEST_CASE("single insertion attaches to the preceding token") {
  Tokens src = toks({1, 3});
  Tokens tgt = toks({1, 2, 3});
  EditScript s = diff(src, tgt);
  REQUIRE(s.tag_string() == "KIK");
  REQUIRE(s.insertions.size() == 1);
  REQUIRE(s.insertions.at(1) == toks({2}));
  REQUIRE(apply_script(src, s) == tgt);
}

TEST_CASE("document-prefix insertion lands on the sentinel") {
  Tokens src = toks({5});
  Tokens tgt = toks({1, 2, 5});
  EditScript s = diff(src, tgt);
  REQUIRE(s.tags[0] == OpTag::INSERT);
  REQUIRE(s.insertions.at(0) == toks({1, 2}));
  REQUIRE(apply_script(src, s) == tgt);
}

TEST_CASE("empty source and empty target") {
  EditScript creation = diff(Tokens{}, toks({1, 2}));
  REQUIRE(creation.tags.size() == 1);
  REQUIRE(apply_script(Tokens{}, creation) == toks({1, 2}));

  EditScript wipe = diff(toks({1, 2}), Tokens{});
  REQUIRE(wipe.tag_string() == "KDD");
  REQUIRE(apply_script(toks({1, 2}), wipe).empty());

  EditScript nothing = diff(Tokens{}, Tokens{});
  REQUIRE(nothing.tag_string() == "K");
  REQUIRE(apply_script(Tokens{}, nothing).empty());
}

TEST_CASE("script cost equals DP distance oracle on random pairs") {
  std::mt19937_64 rng(17);
  for (int it = 0; it < 1000; ++it) {
    Tokens a = random_tokens(rng, 64, 16);
    Tokens b = random_tokens(rng, 64, 16);
    EditScript s = diff(a, b);
    INFO("iteration " << it);
    REQUIRE(script_cost(s) == levenshtein_distance(a, b));
  }
}

TEST_CASE("apply_script(src, diff(src,tgt)) roundtrips on random pairs") {
  std::mt19937_64 rng(29);
  for (int it = 0; it < 2000; ++it) {
    Tokens a = random_tokens(rng, 48, 8);
    Tokens b = random_tokens(rng, 48, 8);
    EditScript s = diff(a, b);
    INFO("iteration " << it);
    REQUIRE(apply_script(a, s) == b);
  }
}

TEST_CASE("diff is deterministic") {
  std::mt19937_64 rng(41);
  for (int it = 0; it < 200; ++it) {
    Tokens a = random_tokens(rng, 32, 6);
    Tokens b = random_tokens(rng, 32, 6);
    REQUIRE(diff(a, b) == diff(a, b));
  }
}

TEST_CASE("structural invariants hold on random scripts") {
  std::mt19937_64 rng(53);
  for (int it = 0; it < 500; ++it) {
    Tokens a = random_tokens(rng, 40, 5);
    Tokens b = random_tokens(rng, 40, 5);
    EditScript s = diff(a, b);
    REQUIRE((s.tags[0] == OpTag::KEEP || s.tags[0] == OpTag::INSERT));
    for (const auto& [pos, content] : s.insertions) {
      REQUIRE(s.tags[pos] == OpTag::INSERT);
      REQUIRE_FALSE(content.empty());
    }
    for (int i = 0; i < static_cast<int>(s.tags.size()); ++i) {
      if (s.tags[i] == OpTag::INSERT) REQUIRE(s.insertions.count(i) == 1);
    }
    // Each REPLACE run is keyed once, at its first position.
    for (const auto& [start, content] : s.replacements) {
      REQUIRE(s.tags[start] == OpTag::REPLACE);
      REQUIRE((start == 1 || s.tags[start - 1] != OpTag::REPLACE));
      REQUIRE_FALSE(content.empty());
    }
  }
}

TEST_CASE("all-KEEP script yields a single span") {
  Tokens x = toks({1, 2, 3});
  auto spans = extract_spans(diff(x, x));
  REQUIRE(spans.size() == 1);
  REQUIRE(spans[0] == EditSpan{0, 4, OpTag::KEEP, {}});
}

TEST_CASE("replacement script yields keep/replace/keep spans in order") {
  Tokens src = toks({9, 1, 2, 9});
  Tokens tgt = toks({9, 3, 4, 5, 9});
  auto spans = extract_spans(diff(src, tgt));
  REQUIRE(spans.size() == 3);
  REQUIRE(spans[0].s_type == OpTag::KEEP);
  REQUIRE(spans[1].s_type == OpTag::REPLACE);
  REQUIRE(spans[1].s_start == 2);
  REQUIRE(spans[1].s_end == 4);
  REQUIRE(spans[1].content == toks({3, 4, 5}));
  REQUIRE(spans[2].s_type == OpTag::KEEP);
}

TEST_CASE("spans partition the tag positions and reproduce the tag sequence") {
  std::mt19937_64 rng(67);
  for (int it = 0; it < 300; ++it) {
    Tokens a = random_tokens(rng, 32, 4);
    Tokens b = random_tokens(rng, 32, 4);
    EditScript s = diff(a, b);
    auto spans = extract_spans(s);
    std::vector<OpTag> rebuilt;
    int expected_start = 0;
    for (const auto& span : spans) {
      REQUIRE(span.s_start == expected_start);
      REQUIRE(span.s_end > span.s_start);
      for (int i = span.s_start; i < span.s_end; ++i) rebuilt.push_back(span.s_type);
      expected_start = span.s_end;
    }
    REQUIRE(expected_start == static_cast<int>(s.tags.size()));
    REQUIRE(rebuilt == s.tags);
  }
}

TEST_CASE("insert positions become one span each") {
  // Two adjacent insertion points must not collapse into one span.
  Tokens src = toks({1, 2});
  Tokens tgt = toks({1, 7, 2, 8});
  EditScript s = diff(src, tgt);
  REQUIRE(s.tag_string() == "KII");
  auto spans = extract_spans(s);
  REQUIRE(spans.size() == 3);
  REQUIRE(spans[1].s_type == OpTag::INSERT);
  REQUIRE(spans[1].content == toks({7}));
  REQUIRE(spans[2].s_type == OpTag::INSERT);
  REQUIRE(spans[2].content == toks({8}));
  REQUIRE(apply_script(src, s) == tgt);
}

TEST_CASE("apply rejects structurally broken scripts") {
  Tokens src = toks({1, 2, 3});
  EditScript s = diff(src, src);

  SECTION("tag count mismatch") {
    REQUIRE_THROWS_AS(apply_script(toks({1, 2}), s), Error);
  }
  SECTION("INSERT tag without content") {
    s.tags[1] = OpTag::INSERT;
    REQUIRE_THROWS_AS(apply_script(src, s), Error);
  }
  SECTION("sentinel cannot delete") {
    s.tags[0] = OpTag::DELETE;
    REQUIRE_THROWS_AS(apply_script(src, s), Error);
  }
  SECTION("REPLACE run without content") {
    s.tags[2] = OpTag::REPLACE;
    REQUIRE_THROWS_AS(apply_script(src, s), Error);
  }
  SECTION("empty insertion content") {
    s.tags[1] = OpTag::INSERT;
    s.insertions[1] = {};
    REQUIRE_THROWS_AS(apply_script(src, s), Error);
  }
}

TEST_CASE("text form round-trips") {
  std::mt19937_64 rng(79);
  for (int it = 0; it < 200; ++it) {
    Tokens a = random_tokens(rng, 24, 4);
    Tokens b = random_tokens(rng, 24, 4);
    EditScript s = diff(a, b);
    EditScript back = script_from_text(script_to_text(s));
    REQUIRE(back == s);
  }
}

TEST_CASE("text form rejects malformed input") {
  REQUIRE_THROWS_AS(script_from_text("TAGS KK\n"), Error);           // missing END
  REQUIRE_THROWS_AS(script_from_text("INS 0 1\nEND\n"), Error);      // INS before TAGS
  REQUIRE_THROWS_AS(script_from_text("TAGS KX\nEND\n"), Error);      // unknown tag char
  REQUIRE_THROWS_AS(script_from_text("TAGS KR\nREP 1 3 5\nEND\n"), Error);  // bad range
  REQUIRE_THROWS_AS(script_from_text("WHAT 1\n"), Error);            // unknown record
}

TEST_CASE("replacement merged with adjacent insertion keeps target order") {
  // A minimal path may interleave an insertion inside a substitution run; the
  // content must come out in target order and reapply exactly.
  std::mt19937_64 rng(97);
  int seen_longer = 0;
  for (int it = 0; it < 2000; ++it) {
    Tokens a = random_tokens(rng, 10, 3, 1);
    Tokens b = random_tokens(rng, 10, 3, 1);
    EditScript s = diff(a, b);
    for (const auto& [start, content] : s.replacements) {
      int run = 0;
      for (size_t i = start; i < s.tags.size() && s.tags[i] == OpTag::REPLACE; ++i) ++run;
      if (static_cast<int>(content.size()) > run) ++seen_longer;
    }
    REQUIRE(apply_script(a, s) == b);
  }
  // The generator must actually exercise the merged case.
  REQUIRE(seen_longer > 0);
}
