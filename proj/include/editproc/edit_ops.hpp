#pragma once

#include <algorithm>
#include <cassert>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "editproc/common.hpp"

namespace editproc {

enum class OpTag : uint8_t { KEEP = 0, DELETE = 1, REPLACE = 2, INSERT = 3 };

inline char op_char(OpTag t) {
  switch (t) {
    case OpTag::KEEP: return 'K';
    case OpTag::DELETE: return 'D';
    case OpTag::REPLACE: return 'R';
    case OpTag::INSERT: return 'I';
  }
  return '?';
}

inline OpTag op_from_char(char c) {
  switch (c) {
    case 'K': return OpTag::KEEP;
    case 'D': return OpTag::DELETE;
    case 'R': return OpTag::REPLACE;
    case 'I': return OpTag::INSERT;
  }
  fail(std::string("unknown op tag char: ") + c);
}

constexpr int kNumOps = 4;

// One edit step over a tokenized document. tags has |src|+1 entries; index 0
// is a sentinel that can only KEEP or carry a document-prefix insertion.
// Insertions attach to the source position they follow (0 = before everything).
// Replacements are keyed by the tag index of the first token of a maximal
// contiguous REPLACE run and hold the full new content of that run.
struct EditScript {
  std::vector<OpTag> tags;
  std::map<int, Tokens> insertions;
  std::map<int, Tokens> replacements;

  int src_size() const { return static_cast<int>(tags.size()) - 1; }

  bool operator==(const EditScript& o) const = default;

  std::string tag_string() const {
    std::string s;
    s.reserve(tags.size());
    for (OpTag t : tags) s.push_back(op_char(t));
    return s;
  }
};

// Contiguous run of one tag. content is empty for KEEP/DELETE, the run's new
// content for REPLACE, and the attached insertion for INSERT. INSERT positions
// are deliberately one span each: each carries its own insertion point, so a
// run of INSERT tags cannot share a single content record.
struct EditSpan {
  int s_start = 0;
  int s_end = 0;
  OpTag s_type = OpTag::KEEP;
  Tokens content;

  bool operator==(const EditSpan& o) const = default;
};

namespace detail {

// Throws unless the script is structurally sound for a source of src_size
// tokens. apply_script() relies on this running first.
inline void validate_script(const EditScript& s, int src_size) {
  require(static_cast<int>(s.tags.size()) == src_size + 1,
          "invalid script: tag count " + std::to_string(s.tags.size()) +
              " does not match source size " + std::to_string(src_size));
  require(s.tags[0] == OpTag::KEEP || s.tags[0] == OpTag::INSERT,
          "invalid script: sentinel tag must be KEEP or INSERT");
  for (const auto& [pos, content] : s.insertions) {
    require(pos >= 0 && pos <= src_size, "invalid script: insertion position out of range");
    require(s.tags[pos] == OpTag::INSERT, "invalid script: insertion at non-INSERT position");
    require(!content.empty(), "invalid script: empty insertion content");
  }
  for (int i = 0; i <= src_size; ++i) {
    if (s.tags[i] == OpTag::INSERT)
      require(s.insertions.count(i), "invalid script: INSERT tag without content");
  }
  for (const auto& [start, content] : s.replacements) {
    require(start >= 1 && start <= src_size, "invalid script: replacement start out of range");
    require(s.tags[start] == OpTag::REPLACE, "invalid script: replacement at non-REPLACE position");
    require(start == 1 || s.tags[start - 1] != OpTag::REPLACE,
            "invalid script: replacement keyed inside a run");
    require(!content.empty(), "invalid script: empty replacement content");
  }
  for (int i = 1; i <= src_size; ++i) {
    if (s.tags[i] == OpTag::REPLACE && (i == 1 || s.tags[i - 1] != OpTag::REPLACE))
      require(s.replacements.count(i), "invalid script: REPLACE run without content");
  }
}

}  // namespace detail

// Token-level Levenshtein alignment with unit costs. Backtrace tie-breaking is
// fixed (match, then substitution, then deletion, then insertion) so the same
// input pair always yields the same script. Insertions adjacent to a
// substitution run fold into that run's replacement content, keeping one tag
// per source token.
inline EditScript diff(const Tokens& src, const Tokens& tgt) {
  const int n = static_cast<int>(src.size());
  const int m = static_cast<int>(tgt.size());

  // R[i*(m+1)+j] = distance between the suffixes src[i,n) and tgt[j,m).
  // Walking forward over R (rather than backward over the prefix table)
  // applies the tie-break order left to right, which is what folds trailing
  // insertions into an adjacent replacement run.
  std::vector<int32_t> r(static_cast<size_t>(n + 1) * (m + 1));
  auto R = [&](int i, int j) -> int32_t& { return r[static_cast<size_t>(i) * (m + 1) + j]; };
  for (int i = 0; i <= n; ++i) R(i, m) = n - i;
  for (int j = 0; j <= m; ++j) R(n, j) = m - j;
  for (int i = n - 1; i >= 0; --i) {
    for (int j = m - 1; j >= 0; --j) {
      int32_t best = R(i + 1, j + 1) + (src[i] == tgt[j] ? 0 : 1);
      best = std::min(best, R(i + 1, j) + 1);
      best = std::min(best, R(i, j + 1) + 1);
      R(i, j) = best;
    }
  }

  enum class Move : uint8_t { Match, Sub, Del, Ins };
  std::vector<Move> moves;
  moves.reserve(n + m);
  int i = 0, j = 0;
  while (i < n || j < m) {
    if (i < n && j < m && src[i] == tgt[j] && R(i + 1, j + 1) == R(i, j)) {
      moves.push_back(Move::Match);
      ++i, ++j;
    } else if (i < n && j < m && R(i + 1, j + 1) + 1 == R(i, j)) {
      moves.push_back(Move::Sub);
      ++i, ++j;
    } else if (i < n && R(i + 1, j) + 1 == R(i, j)) {
      moves.push_back(Move::Del);
      ++i;
    } else {
      assert(j < m && R(i, j + 1) + 1 == R(i, j));
      moves.push_back(Move::Ins);
      ++j;
    }
  }

  EditScript script;
  script.tags.assign(n + 1, OpTag::KEEP);
  int consumed = 0;   // source tokens consumed so far; tag index = consumed
  int produced = 0;   // target tokens produced so far
  int open_run = -1;  // tag index keying the replacement run in progress

  for (Move mv : moves) {
    switch (mv) {
      case Move::Match:
        ++consumed, ++produced;
        script.tags[consumed] = OpTag::KEEP;
        open_run = -1;
        break;
      case Move::Sub: {
        ++consumed;
        script.tags[consumed] = OpTag::REPLACE;
        if (open_run < 0) open_run = consumed;
        script.replacements[open_run].push_back(tgt[produced]);
        ++produced;
        break;
      }
      case Move::Del:
        ++consumed;
        script.tags[consumed] = OpTag::DELETE;
        open_run = -1;
        break;
      case Move::Ins: {
        // Attaches to the last consumed token. A minimal path never inserts
        // next to a deletion, so the target is the sentinel, a kept token,
        // or the replacement run still open.
        if (script.tags[consumed] == OpTag::REPLACE) {
          assert(open_run >= 0);
          script.replacements[open_run].push_back(tgt[produced]);
        } else {
          assert(script.tags[consumed] == OpTag::KEEP || script.tags[consumed] == OpTag::INSERT);
          script.tags[consumed] = OpTag::INSERT;
          script.insertions[consumed].push_back(tgt[produced]);
          open_run = -1;
        }
        ++produced;
        break;
      }
    }
  }
  assert(consumed == n && produced == m);
  return script;
}

// Inverse of diff: replays a script over its source. Throws on structural
// mismatch (tag count, dangling content, out-of-range references).
inline Tokens apply_script(const Tokens& src, const EditScript& script) {
  detail::validate_script(script, static_cast<int>(src.size()));
  Tokens out;
  out.reserve(src.size() + 8);
  if (script.tags[0] == OpTag::INSERT) {
    const Tokens& ins = script.insertions.at(0);
    out.insert(out.end(), ins.begin(), ins.end());
  }
  for (int i = 1; i <= static_cast<int>(src.size()); ++i) {
    switch (script.tags[i]) {
      case OpTag::KEEP:
        out.push_back(src[i - 1]);
        break;
      case OpTag::DELETE:
        break;
      case OpTag::INSERT: {
        out.push_back(src[i - 1]);
        const Tokens& ins = script.insertions.at(i);
        out.insert(out.end(), ins.begin(), ins.end());
        break;
      }
      case OpTag::REPLACE: {
        if (script.tags[i - 1] != OpTag::REPLACE) {
          const Tokens& rep = script.replacements.at(i);
          out.insert(out.end(), rep.begin(), rep.end());
        }
        break;
      }
    }
  }
  return out;
}

// Partition of tag positions into operated regions, ordered by s_start.
// KEEP/DELETE/REPLACE spans are maximal same-tag runs; INSERT positions are
// one span each (see EditSpan).
inline std::vector<EditSpan> extract_spans(const EditScript& script) {
  std::vector<EditSpan> spans;
  const int len = static_cast<int>(script.tags.size());
  int i = 0;
  while (i < len) {
    OpTag t = script.tags[i];
    EditSpan span;
    span.s_start = i;
    span.s_type = t;
    if (t == OpTag::INSERT) {
      span.s_end = i + 1;
      span.content = script.insertions.at(i);
      i += 1;
    } else {
      int j = i + 1;
      while (j < len && script.tags[j] == t) ++j;
      span.s_end = j;
      if (t == OpTag::REPLACE) span.content = script.replacements.at(i);
      i = j;
    }
    spans.push_back(std::move(span));
  }
  return spans;
}

// Unit-cost edit distance realized by the script: deletions count one each, a
// replacement run of m source tokens with k new tokens costs max(m, k), and
// stand-alone insertions cost their token counts.
inline int script_cost(const EditScript& script) {
  int cost = 0;
  const int len = static_cast<int>(script.tags.size());
  for (int i = 0; i < len; ++i) {
    if (script.tags[i] == OpTag::DELETE) ++cost;
  }
  for (const auto& [start, content] : script.replacements) {
    int run = 0;
    for (int i = start; i < len && script.tags[i] == OpTag::REPLACE; ++i) ++run;
    cost += std::max(run, static_cast<int>(content.size()));
  }
  for (const auto& [pos, content] : script.insertions) {
    (void)pos;
    cost += static_cast<int>(content.size());
  }
  return cost;
}

inline bool is_identity(const EditScript& script) {
  for (OpTag t : script.tags)
    if (t != OpTag::KEEP) return false;
  return true;
}

// --- line-oriented text form -------------------------------------------------
//
//   TAGS KKIRD...
//   INS <pos> <id> <id> ...
//   REP <start> <end> <id> <id> ...
//   END
//
// REP's <end> is the exclusive end of the tag run, recorded for readability;
// the parser checks it against the tag string.

inline void write_script(std::ostream& os, const EditScript& script) {
  os << "TAGS " << script.tag_string() << "\n";
  for (const auto& [pos, content] : script.insertions) {
    os << "INS " << pos;
    for (TokenId t : content) os << ' ' << t;
    os << "\n";
  }
  for (const auto& [start, content] : script.replacements) {
    int end = start;
    while (end < static_cast<int>(script.tags.size()) && script.tags[end] == OpTag::REPLACE) ++end;
    os << "REP " << start << ' ' << end;
    for (TokenId t : content) os << ' ' << t;
    os << "\n";
  }
  os << "END\n";
}

inline std::string script_to_text(const EditScript& script) {
  std::ostringstream oss;
  write_script(oss, script);
  return oss.str();
}

inline EditScript read_script(std::istream& is) {
  EditScript script;
  std::string line;
  bool have_tags = false, done = false;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "TAGS") {
      std::string tagstr;
      ls >> tagstr;
      require(!tagstr.empty(), "script parse: empty TAGS line");
      script.tags.clear();
      for (char c : tagstr) script.tags.push_back(op_from_char(c));
      have_tags = true;
    } else if (kind == "INS") {
      require(have_tags, "script parse: INS before TAGS");
      int pos;
      require(static_cast<bool>(ls >> pos), "script parse: bad INS position");
      Tokens content;
      TokenId t;
      while (ls >> t) content.push_back(t);
      script.insertions[pos] = std::move(content);
    } else if (kind == "REP") {
      require(have_tags, "script parse: REP before TAGS");
      int start, end;
      require(static_cast<bool>(ls >> start >> end), "script parse: bad REP range");
      int actual_end = start;
      while (actual_end < static_cast<int>(script.tags.size()) &&
             script.tags[actual_end] == OpTag::REPLACE)
        ++actual_end;
      require(end == actual_end, "script parse: REP range does not match tags");
      Tokens content;
      TokenId t;
      while (ls >> t) content.push_back(t);
      script.replacements[start] = std::move(content);
    } else if (kind == "END") {
      done = true;
      break;
    } else {
      fail("script parse: unknown record '" + kind + "'");
    }
  }
  require(done && have_tags, "script parse: truncated script");
  detail::validate_script(script, script.src_size());
  return script;
}

inline EditScript script_from_text(const std::string& text) {
  std::istringstream iss(text);
  return read_script(iss);
}

}  // namespace editproc
