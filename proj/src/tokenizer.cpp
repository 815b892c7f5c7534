#include "t2tbio/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "t2tbio/error.hpp"

namespace t2tbio {
namespace {

std::size_t utf8_length(unsigned char lead) {
    if (lead < 0x80) return 1;
    if ((lead & 0xE0) == 0xC0) return 2;
    if ((lead & 0xF0) == 0xE0) return 3;
    if ((lead & 0xF8) == 0xF0) return 4;
    return 0;
}

std::string normalize(std::string_view text) {
    std::string out;
    out.reserve(text.size() + 8);
    for (char c : text) {
        if (c == ' ') {
            out += kSpaceMarker;
        } else {
            out += c;
        }
    }
    return out;
}

// Splits normalised text before every space marker so merges stay inside words.
std::vector<std::vector<std::string>> chunk(std::string_view normalized) {
    std::vector<std::vector<std::string>> out;
    std::vector<std::string> cur;
    for (auto& ch : utf8_chars(normalized)) {
        if (ch == kSpaceMarker && !cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
        cur.push_back(std::move(ch));
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

bool is_reserved_piece(std::string_view p) {
    if (p == kPadPiece || p == kEosPiece || p == kUnkPiece) return true;
    constexpr std::string_view prefix = "<extra_id_";
    if (p.size() > prefix.size() + 1 && p.substr(0, prefix.size()) == prefix && p.back() == '>') {
        auto digits = p.substr(prefix.size(), p.size() - prefix.size() - 1);
        return std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; });
    }
    return false;
}

std::string escape_piece(std::string_view p) {
    std::string out;
    for (char c : p) {
        switch (c) {
            case '\\': out += "\\\\"; break;
            case '\n': out += "\\n"; break;
            case '\r': out += "\\r"; break;
            default: out += c;
        }
    }
    return out;
}

std::string unescape_piece(std::string_view p, std::size_t line_no) {
    std::string out;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] != '\\') {
            out += p[i];
            continue;
        }
        if (i + 1 >= p.size()) fail(ErrorKind::data, "vocab line " + std::to_string(line_no) + ": dangling escape");
        const char n = p[++i];
        if (n == '\\') out += '\\';
        else if (n == 'n') out += '\n';
        else if (n == 'r') out += '\r';
        else fail(ErrorKind::data, "vocab line " + std::to_string(line_no) + ": bad escape");
    }
    return out;
}

}  // namespace

std::vector<std::string> utf8_chars(std::string_view text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < text.size()) {
        std::size_t len = utf8_length(static_cast<unsigned char>(text[i]));
        bool ok = len > 0 && i + len <= text.size();
        for (std::size_t j = 1; ok && j < len; ++j) {
            ok = (static_cast<unsigned char>(text[i + j]) & 0xC0) == 0x80;
        }
        if (!ok) len = 1;
        out.emplace_back(text.substr(i, len));
        i += len;
    }
    return out;
}

std::string sentinel_piece(std::size_t k) { return "<extra_id_" + std::to_string(k) + ">"; }

Vocabulary::Vocabulary(std::vector<std::string> learned, std::size_t num_sentinels)
    : num_sentinels_(num_sentinels) {
    pieces_.reserve(3 + learned.size() + num_sentinels);
    pieces_.emplace_back(kPadPiece);
    pieces_.emplace_back(kEosPiece);
    pieces_.emplace_back(kUnkPiece);
    for (auto& p : learned) {
        if (p.empty()) fail(ErrorKind::data, "empty vocabulary piece");
        if (is_reserved_piece(p)) fail(ErrorKind::data, "learned piece collides with reserved token: " + p);
        pieces_.push_back(std::move(p));
    }
    for (std::size_t k = num_sentinels; k-- > 0;) pieces_.push_back(sentinel_piece(k));
    for (std::size_t id = 0; id < pieces_.size(); ++id) {
        if (!piece_to_id_.emplace(pieces_[id], static_cast<TokenId>(id)).second) {
            fail(ErrorKind::data, "duplicate vocabulary piece: " + pieces_[id]);
        }
        if (id >= 3 && id < 3 + num_learned()) {
            max_piece_chars_ = std::max(max_piece_chars_, utf8_chars(pieces_[id]).size());
        }
    }
}

const std::string& Vocabulary::piece(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= pieces_.size()) {
        fail(ErrorKind::data, "id out of range: " + std::to_string(id));
    }
    return pieces_[static_cast<std::size_t>(id)];
}

TokenId Vocabulary::find(std::string_view piece) const {
    auto it = piece_to_id_.find(std::string(piece));
    return it == piece_to_id_.end() ? -1 : it->second;
}

TokenId Vocabulary::sentinel_id(std::size_t k) const {
    if (k >= num_sentinels_) fail(ErrorKind::data, "sentinel index out of range: " + std::to_string(k));
    return static_cast<TokenId>(pieces_.size() - 1 - k);
}

bool Vocabulary::is_sentinel(TokenId id) const {
    return id >= 0 && static_cast<std::size_t>(id) < pieces_.size() &&
           static_cast<std::size_t>(id) >= pieces_.size() - num_sentinels_;
}

std::size_t Vocabulary::sentinel_index(TokenId id) const {
    return pieces_.size() - 1 - static_cast<std::size_t>(id);
}

std::string Vocabulary::serialize() const {
    std::string out = "t2tbio-vocab v1 size=" + std::to_string(size()) +
                      " sentinels=" + std::to_string(num_sentinels_) + "\n";
    for (const auto& p : pieces_) {
        out += escape_piece(p);
        out += '\n';
    }
    return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) fail(ErrorKind::data, "cannot write vocabulary: " + path.string());
    f << serialize();
    if (!f) fail(ErrorKind::data, "write failed: " + path.string());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail(ErrorKind::data, "cannot open vocabulary: " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
}

Vocabulary Vocabulary::parse(std::string_view text) {
    std::vector<std::string> lines;
    std::size_t start = 0;
    while (start < text.size()) {
        auto nl = text.find('\n', start);
        if (nl == std::string_view::npos) nl = text.size();
        lines.emplace_back(text.substr(start, nl - start));
        start = nl + 1;
    }
    if (lines.empty()) fail(ErrorKind::data, "vocab: missing header");

    std::size_t size = 0;
    std::size_t sentinels = 0;
    {
        std::istringstream hs(lines[0]);
        std::string magic, version, size_kv, sent_kv, extra;
        hs >> magic >> version >> size_kv >> sent_kv;
        const bool trailing = static_cast<bool>(hs >> extra);
        auto parse_kv = [](const std::string& kv, std::string_view key, std::size_t& out) {
            if (kv.size() <= key.size() || kv.compare(0, key.size(), key) != 0) return false;
            const auto digits = kv.substr(key.size());
            if (digits.empty() || digits.size() > 9 ||
                !std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; })) {
                return false;
            }
            out = std::stoul(digits);
            return true;
        };
        if (magic != "t2tbio-vocab" || version != "v1" || trailing || !parse_kv(size_kv, "size=", size) ||
            !parse_kv(sent_kv, "sentinels=", sentinels)) {
            fail(ErrorKind::data, "vocab line 1: bad header");
        }
    }
    if (size < 3 + sentinels) fail(ErrorKind::data, "vocab: size smaller than reserved ids");
    if (lines.size() - 1 != size) {
        fail(ErrorKind::data, "vocab: header declares " + std::to_string(size) + " pieces, found " +
                                  std::to_string(lines.size() - 1));
    }
    std::vector<std::string> pieces;
    pieces.reserve(size);
    for (std::size_t i = 1; i < lines.size(); ++i) pieces.push_back(unescape_piece(lines[i], i + 1));

    if (pieces[0] != kPadPiece || pieces[1] != kEosPiece || pieces[2] != kUnkPiece) {
        fail(ErrorKind::data, "vocab: special pieces out of place");
    }
    for (std::size_t k = 0; k < sentinels; ++k) {
        if (pieces[size - 1 - k] != sentinel_piece(k)) {
            fail(ErrorKind::data, "vocab line " + std::to_string(size - k + 1) + ": expected " + sentinel_piece(k));
        }
    }
    std::vector<std::string> learned(pieces.begin() + 3, pieces.end() - static_cast<std::ptrdiff_t>(sentinels));
    return Vocabulary(std::move(learned), sentinels);
}

std::size_t vocab_size_floor(std::span<const std::string> corpus, std::size_t num_sentinels) {
    std::set<std::string> chars;
    for (const auto& line : corpus) {
        for (auto& c : utf8_chars(normalize(line))) chars.insert(std::move(c));
    }
    return 3 + num_sentinels + chars.size();
}

Vocabulary train_vocab(std::span<const std::string> corpus, std::size_t target_size, std::size_t num_sentinels) {
    if (corpus.empty()) fail(ErrorKind::data, "empty corpus");

    // Word (chunk) frequencies; std::map keeps iteration order deterministic.
    std::map<std::vector<std::string>, std::int64_t> words;
    std::set<std::string> alphabet;
    for (const auto& line : corpus) {
        for (auto& w : chunk(normalize(line))) {
            for (const auto& c : w) alphabet.insert(c);
            ++words[std::move(w)];
        }
    }
    const std::size_t floor = 3 + num_sentinels + alphabet.size();
    if (alphabet.empty()) fail(ErrorKind::data, "empty corpus");
    if (target_size < floor) {
        fail(ErrorKind::config, "vocab size below floor: " + std::to_string(target_size) + " < " + std::to_string(floor));
    }

    std::vector<std::string> learned;
    std::set<std::string> known;
    for (const auto& c : alphabet) {
        if (is_reserved_piece(c)) continue;  // impossible for single codepoints; kept for symmetry
        learned.push_back(c);
        known.insert(c);
    }

    std::vector<std::pair<std::vector<std::string>, std::int64_t>> segs(words.begin(), words.end());
    const std::size_t budget = target_size - 3 - num_sentinels;

    while (learned.size() < budget) {
        std::map<std::pair<std::string, std::string>, std::int64_t> counts;
        for (const auto& [sym, freq] : segs) {
            for (std::size_t i = 0; i + 1 < sym.size(); ++i) counts[{sym[i], sym[i + 1]}] += freq;
        }
        const std::pair<std::string, std::string>* best = nullptr;
        std::int64_t best_count = 1;
        for (const auto& [pair, count] : counts) {
            if (count <= best_count) continue;  // strict: first (smallest) pair wins ties
            const std::string merged = pair.first + pair.second;
            if (is_reserved_piece(merged)) continue;
            best = &pair;
            best_count = count;
        }
        if (best == nullptr) break;

        const std::string left = best->first;
        const std::string right = best->second;
        const std::string merged = left + right;
        // The same string can arise from different splits; keep one id for it.
        if (known.insert(merged).second) learned.push_back(merged);
        for (auto& [sym, freq] : segs) {
            std::vector<std::string> next;
            next.reserve(sym.size());
            for (std::size_t i = 0; i < sym.size(); ++i) {
                if (i + 1 < sym.size() && sym[i] == left && sym[i + 1] == right) {
                    next.push_back(merged);
                    ++i;
                } else {
                    next.push_back(sym[i]);
                }
            }
            sym = std::move(next);
        }
    }
    return Vocabulary(std::move(learned), num_sentinels);
}

TokenSequence encode(const Vocabulary& v, std::string_view text) {
    TokenSequence out;
    if (text.empty()) return out;
    const auto chars = utf8_chars(normalize(text));
    const std::size_t learned_end = 3 + v.num_learned();
    std::size_t i = 0;
    std::string candidate;
    while (i < chars.size()) {
        const std::size_t max_len = std::min(v.max_piece_chars(), chars.size() - i);
        TokenId match = -1;
        std::size_t match_len = 1;
        for (std::size_t len = max_len; len >= 1; --len) {
            candidate.clear();
            for (std::size_t j = 0; j < len; ++j) candidate += chars[i + j];
            const TokenId id = v.find(candidate);
            if (id >= 3 && static_cast<std::size_t>(id) < learned_end) {
                match = id;
                match_len = len;
                break;
            }
        }
        out.push_back(match < 0 ? Vocabulary::unk_id : match);
        i += match_len;
    }
    return out;
}

std::string decode(const Vocabulary& v, std::span<const TokenId> ids) {
    std::string raw;
    for (TokenId id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= v.size()) {
            fail(ErrorKind::data, "id out of range: " + std::to_string(id));
        }
        if (id == Vocabulary::eos_id) break;
        if (id == Vocabulary::pad_id) continue;
        raw += v.piece(id);
    }
    std::string out;
    out.reserve(raw.size());
    for (std::size_t i = 0; i < raw.size();) {
        if (raw.compare(i, kSpaceMarker.size(), kSpaceMarker) == 0) {
            out += ' ';
            i += kSpaceMarker.size();
        } else {
            out += raw[i++];
        }
    }
    return out;
}

}  // namespace t2tbio
