#pragma once

// Fixed character-level vocabulary: CTC blank, BOS, EOS, characters (lower
// and upper case for the dual-case loss), then a contiguous block of
// timestamp tokens quantizing a 30 s window at 0.2 s.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <string>
#include <vector>

#include "tsasr/errors.hpp"

namespace tsasr {

struct Vocab {
    static constexpr int kBlank = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kCharBegin = 3;

    std::string charset = " 'abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ";
    double ts_step = 0.2;
    double window_seconds = 30.0;

    int ts_begin() const { return kCharBegin + static_cast<int>(charset.size()); }
    int ts_count() const { return static_cast<int>(std::llround(window_seconds / ts_step)) + 1; }
    int size() const { return ts_begin() + ts_count(); }

    bool is_char(int id) const { return id >= kCharBegin && id < ts_begin(); }
    bool is_timestamp(int id) const { return id >= ts_begin() && id < size(); }

    double timestamp_seconds(int id) const {
        require(is_timestamp(id), "vocab: not a timestamp token");
        return (id - ts_begin()) * ts_step;
    }

    int timestamp_id(double seconds) const {
        const int steps = ts_count() - 1;
        int q = static_cast<int>(std::llround(seconds / ts_step));
        q = std::clamp(q, 0, steps);
        return ts_begin() + q;
    }

    int char_id(char c) const {
        const size_t pos = charset.find(c);
        if (pos == std::string::npos) throw ParseError(std::string("vocab: unsupported character '") + c + "'");
        return kCharBegin + static_cast<int>(pos);
    }

    char id_char(int id) const {
        require(is_char(id), "vocab: not a character token");
        return charset[static_cast<size_t>(id - kCharBegin)];
    }

    std::vector<int> encode(const std::string& text) const {
        std::vector<int> out;
        out.reserve(text.size());
        for (char c : text) out.push_back(char_id(c));
        return out;
    }

    // Character tokens only; specials and timestamps are skipped.
    std::string decode_chars(const std::vector<int>& ids) const {
        std::string out;
        for (int id : ids)
            if (is_char(id)) out.push_back(id_char(id));
        return out;
    }

    std::string token_name(int id) const {
        if (id == kBlank) return "<blank>";
        if (id == kBos) return "<bos>";
        if (id == kEos) return "<eos>";
        if (is_char(id)) return std::string(1, id_char(id));
        if (is_timestamp(id)) {
            char buf[16];
            std::snprintf(buf, sizeof(buf), "<%.1f>", timestamp_seconds(id));
            return buf;
        }
        return "<invalid>";
    }
};

inline std::string to_upper_ascii(const std::string& s) {
    std::string out = s;
    for (char& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return out;
}

inline std::string to_lower_ascii(const std::string& s) {
    std::string out = s;
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

}  // namespace tsasr
