#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace t2tbio {

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

// Spaces are rewritten to this private-use codepoint (U+E000) before segmentation.
inline constexpr std::string_view kSpaceMarker = "\xEE\x80\x80";

inline constexpr std::string_view kPadPiece = "<pad>";
inline constexpr std::string_view kEosPiece = "</s>";
inline constexpr std::string_view kUnkPiece = "<unk>";

std::string sentinel_piece(std::size_t k);

// Subword vocabulary. Layout: pad=0, eos=1, unk=2, learned pieces, then sentinels
// at the top with sentinel k at id size()-1-k. Immutable once constructed.
class Vocabulary {
public:
    static constexpr TokenId pad_id = 0;
    static constexpr TokenId eos_id = 1;
    static constexpr TokenId unk_id = 2;

    Vocabulary() = default;
    // Builds from learned pieces (excluding specials and sentinels); validates invariants.
    Vocabulary(std::vector<std::string> learned, std::size_t num_sentinels);

    std::size_t size() const { return pieces_.size(); }
    std::size_t num_sentinels() const { return num_sentinels_; }
    std::size_t num_learned() const { return pieces_.size() - 3 - num_sentinels_; }
    const std::vector<std::string>& pieces() const { return pieces_; }
    const std::string& piece(TokenId id) const;

    // -1 when absent.
    TokenId find(std::string_view piece) const;

    TokenId sentinel_id(std::size_t k) const;
    bool is_sentinel(TokenId id) const;
    // Index k of a sentinel id; requires is_sentinel(id).
    std::size_t sentinel_index(TokenId id) const;
    bool is_reserved(TokenId id) const { return id < 3 || is_sentinel(id); }

    std::size_t max_piece_chars() const { return max_piece_chars_; }

    // "t2tbio-vocab v1 size=<n> sentinels=<k>" header then one piece per line.
    void save(const std::filesystem::path& path) const;
    std::string serialize() const;
    static Vocabulary load(const std::filesystem::path& path);
    static Vocabulary parse(std::string_view text);

    friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
        return a.pieces_ == b.pieces_ && a.num_sentinels_ == b.num_sentinels_;
    }

private:
    std::vector<std::string> pieces_;
    std::unordered_map<std::string, TokenId> piece_to_id_;
    std::size_t num_sentinels_ = 0;
    std::size_t max_piece_chars_ = 1;
};

// Smallest legal target size for a corpus.
std::size_t vocab_size_floor(std::span<const std::string> corpus, std::size_t num_sentinels);

// Greedy pair-merge training. Merges stop when the target size is reached or no
// adjacent pair occurs at least twice; equal-count candidates resolve to the
// lexicographically smallest (left, right) pair.
Vocabulary train_vocab(std::span<const std::string> corpus, std::size_t target_size,
                       std::size_t num_sentinels = 100);

// Greedy longest-match segmentation; never emits pad or sentinel ids.
TokenSequence encode(const Vocabulary& v, std::string_view text);

// Stops at the first eos, skips pad, renders sentinel k as "<extra_id_k>".
std::string decode(const Vocabulary& v, std::span<const TokenId> ids);

// Splits UTF-8 text into codepoint strings. Invalid bytes become single-byte units.
std::vector<std::string> utf8_chars(std::string_view text);

}  // namespace t2tbio
