#pragma once

#include <array>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "editproc/common.hpp"

namespace editproc {

// Byte-pair-merge subword vocabulary with byte fallback: the 256 single-byte
// pieces are always present, so encoding any byte string is total and
// decode(encode(t)) == t holds for arbitrary input. Merges never cross chunk
// boundaries; a new chunk starts at every space or newline byte, which keeps
// pieces word-like and encoding fast.
//
// Ids 0..3 are reserved specials, 4..259 the byte pieces, 260+ learned merges.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;   // "<s>"
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kSep = 3;   // "</s>"
  static constexpr int kNumSpecials = 4;
  static constexpr int kByteBase = kNumSpecials;        // id of byte 0x00
  static constexpr int kBaseSize = kNumSpecials + 256;  // 260

  Vocabulary() = default;

  int size() const { return static_cast<int>(pieces_.size()); }

  const std::string& piece(TokenId id) const {
    require(id >= 0 && id < size(), "piece id out of range: " + std::to_string(id));
    return pieces_[id];
  }

  static bool is_special(TokenId id) { return id >= 0 && id < kNumSpecials; }

  // Greedy byte-pair training over the corpus until exactly target_size
  // pieces exist. Ties break on pair frequency, then on the smaller pair.
  static Vocabulary train(const std::vector<std::string>& corpus, int target_size) {
    require(target_size >= kBaseSize,
            "vocabulary target size must be at least " + std::to_string(kBaseSize));
    Vocabulary v = byte_fallback();

    // Unique chunks with multiplicities; merging operates on these only.
    std::unordered_map<std::string, int64_t> chunk_counts;
    int64_t total_bytes = 0;
    for (const auto& text : corpus) {
      total_bytes += static_cast<int64_t>(text.size());
      for (auto& chunk : split_chunks(text)) ++chunk_counts[chunk];
    }
    require(total_bytes > 0, "cannot train a vocabulary on an empty corpus");

    struct Chunk {
      std::vector<int> syms;
      int64_t count;
    };
    std::vector<Chunk> chunks;
    chunks.reserve(chunk_counts.size());
    for (const auto& [text, count] : chunk_counts) {
      Chunk c;
      c.count = count;
      c.syms.reserve(text.size());
      for (unsigned char b : text) c.syms.push_back(kByteBase + b);
      chunks.push_back(std::move(c));
    }

    auto pair_key = [](int a, int b) {
      return (static_cast<uint64_t>(static_cast<uint32_t>(a)) << 32) | static_cast<uint32_t>(b);
    };
    std::unordered_map<uint64_t, int64_t> pair_counts;
    auto add_chunk_pairs = [&](const Chunk& c, int64_t sign) {
      for (size_t i = 0; i + 1 < c.syms.size(); ++i)
        pair_counts[pair_key(c.syms[i], c.syms[i + 1])] += sign * c.count;
    };
    for (const auto& c : chunks) add_chunk_pairs(c, +1);

    while (v.size() < target_size) {
      uint64_t best_key = 0;
      int64_t best_count = 0;
      for (const auto& [key, count] : pair_counts) {
        if (count > best_count || (count == best_count && count > 0 && key < best_key)) {
          best_key = key;
          best_count = count;
        }
      }
      require(best_count > 0, "corpus exhausted before reaching the requested vocabulary size");

      const int left = static_cast<int>(best_key >> 32);
      const int right = static_cast<int>(best_key & 0xffffffffu);
      const int merged = v.add_merge(left, right);

      for (auto& c : chunks) {
        bool has = false;
        for (size_t i = 0; i + 1 < c.syms.size(); ++i)
          if (c.syms[i] == left && c.syms[i + 1] == right) {
            has = true;
            break;
          }
        if (!has) continue;
        add_chunk_pairs(c, -1);
        apply_merge(c.syms, left, right, merged);
        add_chunk_pairs(c, +1);
      }
      // Drop exhausted entries so the scan does not grow without bound.
      std::erase_if(pair_counts, [](const auto& kv) { return kv.second <= 0; });
    }
    return v;
  }

  static Vocabulary byte_fallback() {
    Vocabulary v;
    v.pieces_ = {"<pad>", "<s>", "<eos>", "</s>"};
    for (int b = 0; b < 256; ++b) v.pieces_.push_back(std::string(1, static_cast<char>(b)));
    return v;
  }

  Tokens encode(std::string_view text) const {
    Tokens out;
    out.reserve(text.size() / 3 + 4);
    for (const auto& chunk : split_chunks(text)) {
      std::vector<int> syms;
      syms.reserve(chunk.size());
      for (unsigned char b : chunk) syms.push_back(kByteBase + b);
      while (syms.size() > 1) {
        int best_rank = std::numeric_limits<int>::max();
        int best_pos = -1;
        for (size_t i = 0; i + 1 < syms.size(); ++i) {
          auto it = merges_.find(merge_key(syms[i], syms[i + 1]));
          if (it != merges_.end() && it->second.rank < best_rank) {
            best_rank = it->second.rank;
            best_pos = static_cast<int>(i);
          }
        }
        if (best_pos < 0) break;
        const int left = syms[best_pos];
        const int right = syms[best_pos + 1];
        apply_merge(syms, left, right, merges_.at(merge_key(left, right)).result);
      }
      for (int s : syms) out.push_back(s);
    }
    return out;
  }

  std::string decode(const Tokens& ids) const {
    std::string out;
    for (TokenId id : ids) {
      require(id >= 0 && id < size(), "decode: unknown token id " + std::to_string(id));
      out += pieces_[id];
    }
    return out;
  }

  // --- file form: version line, then one escaped piece per line; merged
  // pieces append their parent ids so the merge table can be rebuilt.
  std::string to_file_string() const {
    std::ostringstream os;
    os << "editproc-vocab v1\n";
    for (int id = 0; id < size(); ++id) {
      if (id < kBaseSize) {
        os << (id < kNumSpecials ? pieces_[id] : escape(pieces_[id])) << "\n";
      } else {
        const auto& m = merge_rules_[id - kBaseSize];
        os << escape(pieces_[id]) << ' ' << m.left << ' ' << m.right << "\n";
      }
    }
    return os.str();
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    require(f.good(), "cannot write vocabulary file: " + path);
    f << to_file_string();
    require(f.good(), "error writing vocabulary file: " + path);
  }

  static Vocabulary from_file_string(const std::string& content) {
    std::istringstream is(content);
    std::string line;
    require(static_cast<bool>(std::getline(is, line)) && line == "editproc-vocab v1",
            "unsupported vocabulary file header");
    Vocabulary v = byte_fallback();
    int id = 0;
    while (std::getline(is, line)) {
      if (id < kNumSpecials) {
        require(line == v.pieces_[id], "vocabulary file: unexpected special piece");
      } else if (id < kBaseSize) {
        require(unescape(line) == v.pieces_[id], "vocabulary file: unexpected byte piece");
      } else {
        auto last = line.find_last_of(' ');
        auto prev = line.find_last_of(' ', last == std::string::npos ? 0 : last - 1);
        require(last != std::string::npos && prev != std::string::npos,
                "vocabulary file: merged piece without parents");
        int left = std::stoi(line.substr(prev + 1, last - prev - 1));
        int right = std::stoi(line.substr(last + 1));
        require(left >= 0 && left < id && right >= 0 && right < id,
                "vocabulary file: merge parents out of range");
        int merged = v.add_merge(left, right);
        require(v.pieces_[merged] == unescape(line.substr(0, prev)),
                "vocabulary file: merged piece does not match parents");
      }
      ++id;
    }
    require(id >= kBaseSize, "vocabulary file truncated");
    return v;
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "cannot read vocabulary file: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return from_file_string(ss.str());
  }

  uint64_t hash() const { return fnv1a64(to_file_string()); }

 private:
  struct MergeInfo {
    int rank;
    int result;
  };
  struct MergeRule {
    int left, right;
  };

  static uint64_t merge_key(int a, int b) {
    return (static_cast<uint64_t>(static_cast<uint32_t>(a)) << 32) | static_cast<uint32_t>(b);
  }

  int add_merge(int left, int right) {
    const int id = size();
    pieces_.push_back(pieces_[left] + pieces_[right]);
    merges_[merge_key(left, right)] = {static_cast<int>(merge_rules_.size()), id};
    merge_rules_.push_back({left, right});
    return id;
  }

  static void apply_merge(std::vector<int>& syms, int left, int right, int merged) {
    size_t w = 0;
    for (size_t r = 0; r < syms.size();) {
      if (r + 1 < syms.size() && syms[r] == left && syms[r + 1] == right) {
        syms[w++] = merged;
        r += 2;
      } else {
        syms[w++] = syms[r++];
      }
    }
    syms.resize(w);
  }

  static std::vector<std::string> split_chunks(std::string_view text) {
    std::vector<std::string> chunks;
    std::string cur;
    for (char ch : text) {
      if ((ch == ' ' || ch == '\n') && !cur.empty()) {
        chunks.push_back(cur);
        cur.clear();
      }
      cur.push_back(ch);
    }
    if (!cur.empty()) chunks.push_back(cur);
    return chunks;
  }

  static std::string escape(const std::string& raw) {
    std::string out;
    for (unsigned char c : raw) {
      switch (c) {
        case '\\': out += "\\\\"; break;
        case ' ': out += "\\s"; break;
        case '\n': out += "\\n"; break;
        case '\t': out += "\\t"; break;
        case '\r': out += "\\r"; break;
        default:
          if (c < 0x20 || c == 0x7f) {
            char buf[8];
            std::snprintf(buf, sizeof(buf), "\\x%02x", c);
            out += buf;
          } else {
            out.push_back(static_cast<char>(c));
          }
      }
    }
    return out;
  }

  static std::string unescape(const std::string& esc) {
    std::string out;
    for (size_t i = 0; i < esc.size(); ++i) {
      if (esc[i] != '\\') {
        out.push_back(esc[i]);
        continue;
      }
      require(i + 1 < esc.size(), "vocabulary file: dangling escape");
      char c = esc[++i];
      switch (c) {
        case '\\': out.push_back('\\'); break;
        case 's': out.push_back(' '); break;
        case 'n': out.push_back('\n'); break;
        case 't': out.push_back('\t'); break;
        case 'r': out.push_back('\r'); break;
        case 'x': {
          require(i + 2 < esc.size(), "vocabulary file: truncated \\x escape");
          int value = std::stoi(esc.substr(i + 1, 2), nullptr, 16);
          out.push_back(static_cast<char>(value));
          i += 2;
          break;
        }
        default: fail("vocabulary file: unknown escape");
      }
    }
    return out;
  }

  std::vector<std::string> pieces_;
  std::unordered_map<uint64_t, MergeInfo> merges_;
  std::vector<MergeRule> merge_rules_;
};

}  // namespace editproc
