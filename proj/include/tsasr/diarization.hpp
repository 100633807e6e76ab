#pragma once

// Diarization ingestion: RTTM parsing, rasterization of segments to a
// per-speaker frame activity matrix D, and the Silence/Target/Non-target/
// Overlap probabilities computed per frame from D.

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsasr/tensor.hpp"

namespace tsasr {

struct DiarizationSegment {
    std::string speaker;
    double start = 0.0;  // seconds
    double end = 0.0;    // seconds, > start
    std::string recording;
};

// D in [0,1]^{S x T}: values.at(s, t) is the activity probability of speaker
// s at frame t.
struct SpeakerActivity {
    Tensor values;  // [S x T]
    double frame_rate = 0.0;
    std::vector<std::string> speaker_labels;

    int num_speakers() const { return values.shape[0]; }
    int num_frames() const { return values.shape[1]; }

    void validate() const {
        require_dim(values.ndim() == 2 && values.shape[0] >= 1 && values.shape[1] >= 1,
                    "SpeakerActivity: need S >= 1, T >= 1");
        require(static_cast<int>(speaker_labels.size()) == values.shape[0],
                "SpeakerActivity: label count mismatch");
        require(frame_rate > 0, "SpeakerActivity: frame rate must be positive");
        for (double v : values.data)
            require(v >= 0.0 && v <= 1.0 && std::isfinite(v), "SpeakerActivity: entries must lie in [0,1]");
    }

    nlohmann::json to_json() const {
        nlohmann::json rows = nlohmann::json::array();
        for (int s = 0; s < num_speakers(); ++s) {
            nlohmann::json row = nlohmann::json::array();
            for (int t = 0; t < num_frames(); ++t) row.push_back(values.at(s, t));
            rows.push_back(std::move(row));
        }
        return {{"speaker_labels", speaker_labels}, {"frame_rate", frame_rate}, {"rows", rows}};
    }
};

// Per-frame (p_S, p_T, p_N, p_O) for one chosen target speaker.
struct StnoMask {
    Tensor values;  // [T x 4]
    int target_index = -1;

    int num_frames() const { return values.shape[0]; }

    double p_s(int t) const { return values.at(t, 0); }
    double p_t(int t) const { return values.at(t, 1); }
    double p_n(int t) const { return values.at(t, 2); }
    double p_o(int t) const { return values.at(t, 3); }

    // Activity of the target at frame t; the identity p_T + p_O = d(s_k, t)
    // holds exactly under the defining equations.
    double target_activity(int t) const { return p_t(t) + p_o(t); }

    bool row_is_one_hot(int t) const {
        int ones = 0;
        for (int k = 0; k < 4; ++k) {
            const double v = values.at(t, k);
            if (v == 1.0) ++ones;
            else if (v != 0.0) return false;
        }
        return ones == 1;
    }

    bool is_hard() const {
        for (int t = 0; t < num_frames(); ++t)
            if (!row_is_one_hot(t)) return false;
        return true;
    }

    void validate(double row_tol = 1e-9) const {
        require_dim(values.ndim() == 2 && values.shape[1] == 4, "StnoMask: values must be [T x 4]");
        for (int t = 0; t < num_frames(); ++t) {
            double sum = 0.0;
            for (int k = 0; k < 4; ++k) {
                const double v = values.at(t, k);
                require(v >= 0.0 && v <= 1.0, "StnoMask: entry outside [0,1]");
                sum += v;
            }
            require(std::fabs(sum - 1.0) <= row_tol, "StnoMask: row does not sum to 1");
        }
    }
};

// ---------------------------------------------------------------------------
// RTTM
// ---------------------------------------------------------------------------

// `SPEAKER <rec> <chan> <tbeg> <tdur> <NA> <NA> <spk> <NA> <NA>`; other line
// types are ignored.
inline std::vector<DiarizationSegment> parse_rttm(const std::string& text) {
    std::vector<DiarizationSegment> segments;
    std::istringstream is(text);
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        std::istringstream ls(line);
        std::string type;
        if (!(ls >> type)) continue;  // blank line
        if (type != "SPEAKER") continue;
        std::string rec, chan, tbeg_s, tdur_s, ortho, stype, spk;
        if (!(ls >> rec >> chan >> tbeg_s >> tdur_s >> ortho >> stype >> spk)) {
            throw ParseError("rttm: truncated SPEAKER line " + std::to_string(line_no));
        }
        double tbeg = 0.0, tdur = 0.0;
        try {
            size_t used = 0;
            tbeg = std::stod(tbeg_s, &used);
            if (used != tbeg_s.size()) throw std::invalid_argument(tbeg_s);
            tdur = std::stod(tdur_s, &used);
            if (used != tdur_s.size()) throw std::invalid_argument(tdur_s);
        } catch (const std::exception&) {
            throw ParseError("rttm: bad numeric field at line " + std::to_string(line_no));
        }
        if (!std::isfinite(tbeg) || !std::isfinite(tdur) || tdur <= 0.0 || tbeg < 0.0)
            throw ParseError("rttm: invalid times at line " + std::to_string(line_no));
        segments.push_back({spk, tbeg, tbeg + tdur, rec});
    }
    return segments;
}

inline std::string format_rttm(const std::vector<DiarizationSegment>& segments) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(3);
    for (const auto& seg : segments) {
        os << "SPEAKER " << seg.recording << " 1 " << seg.start << ' ' << (seg.end - seg.start)
           << " <NA> <NA> " << seg.speaker << " <NA> <NA>\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Rasterization and STNO
// ---------------------------------------------------------------------------

// d(s, t) = 1 iff the center of frame t lies inside one of speaker s's
// segments. Speakers are ordered by first appearance in the segment list.
inline SpeakerActivity activity_matrix(const std::vector<DiarizationSegment>& segments,
                                       double frame_rate, double duration) {
    require(frame_rate > 0, "activity_matrix: frame rate must be positive");
    if (segments.empty() && duration <= 0.0)
        throw InputError("activity_matrix: no segments and no duration");

    std::vector<std::string> labels;
    std::map<std::string, int> index;
    for (const auto& seg : segments) {
        if (index.find(seg.speaker) == index.end()) {
            index[seg.speaker] = static_cast<int>(labels.size());
            labels.push_back(seg.speaker);
        }
    }
    if (labels.empty()) labels.push_back("none");

    const int frames = std::max(1, static_cast<int>(std::llround(duration * frame_rate)));
    SpeakerActivity act;
    act.values = Tensor::zeros({static_cast<int>(labels.size()), frames});
    act.frame_rate = frame_rate;
    act.speaker_labels = labels;
    for (const auto& seg : segments) {
        const int s = index[seg.speaker];
        // first frame whose center (t + 0.5)/fps is >= start, last < end
        int t0 = static_cast<int>(std::ceil(seg.start * frame_rate - 0.5));
        int t1 = static_cast<int>(std::ceil(seg.end * frame_rate - 0.5));
        t0 = std::max(0, t0);
        t1 = std::min(frames, t1);
        for (int t = t0; t < t1; ++t) act.values.at(s, t) = 1.0;  // no accumulation above 1
    }
    return act;
}

// Eq. family for the per-frame event probabilities:
//   p_S = prod_s (1 - d(s,t))
//   p_T = d(s_k,t) * prod_{s != s_k} (1 - d(s,t))
//   p_N = (1 - p_S) - d(s_k,t)
//   p_O = d(s_k,t) - p_T
// p_N is a difference and may underflow to a tiny negative; it is clamped to
// zero and the row renormalized.
inline StnoMask stno_mask(const SpeakerActivity& activity, int target_index) {
    require(target_index >= 0 && target_index < activity.num_speakers(), "stno_mask: target index out of range");
    const int S = activity.num_speakers(), T = activity.num_frames();
    StnoMask mask;
    mask.values = Tensor::zeros({T, 4});
    mask.target_index = target_index;
    for (int t = 0; t < T; ++t) {
        const double dk = activity.values.at(target_index, t);
        double prod_all = 1.0, prod_others = 1.0;
        for (int s = 0; s < S; ++s) {
            const double d = activity.values.at(s, t);
            prod_all *= (1.0 - d);
            if (s != target_index) prod_others *= (1.0 - d);
        }
        double ps = prod_all;
        double pt = dk * prod_others;
        double pn = (1.0 - ps) - dk;
        double po = dk - pt;
        bool clamped = false;
        if (pn < 0.0) {
            require(pn > -1e-9, "stno_mask: p_N below tolerance");
            pn = 0.0;
            clamped = true;
        }
        if (po < 0.0) {
            require(po > -1e-9, "stno_mask: p_O below tolerance");
            po = 0.0;
            clamped = true;
        }
        if (clamped) {
            const double sum = ps + pt + pn + po;
            if (sum > 0.0) {
                ps /= sum;
                pt /= sum;
                pn /= sum;
                po /= sum;
            }
        }
        mask.values.at(t, 0) = std::clamp(ps, 0.0, 1.0);
        mask.values.at(t, 1) = std::clamp(pt, 0.0, 1.0);
        mask.values.at(t, 2) = std::clamp(pn, 0.0, 1.0);
        mask.values.at(t, 3) = std::clamp(po, 0.0, 1.0);
    }
    return mask;
}

// Mask for a target that is never active: rows are silence vs non-target.
inline StnoMask stno_mask_inactive_target(const SpeakerActivity& activity) {
    SpeakerActivity extended = activity;
    extended.values = Tensor::zeros({activity.num_speakers() + 1, activity.num_frames()});
    for (int s = 0; s < activity.num_speakers(); ++s)
        for (int t = 0; t < activity.num_frames(); ++t)
            extended.values.at(s, t) = activity.values.at(s, t);
    extended.speaker_labels.push_back("__inactive__");
    StnoMask mask = stno_mask(extended, activity.num_speakers());
    mask.target_index = -1;
    return mask;
}

// Uninformative mask: every frame marked target-only.
inline StnoMask stno_mask_all_target(int frames) {
    StnoMask mask;
    mask.values = Tensor::zeros({frames, 4});
    mask.target_index = -1;
    for (int t = 0; t < frames; ++t) mask.values.at(t, 1) = 1.0;
    return mask;
}

}  // namespace tsasr
