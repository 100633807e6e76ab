#pragma once

// Speaker-attributed and speaker-agnostic error metrics: WER, cpWER, tcpWER,
// ORC-WER, tcORC-WER and DER. Speaker/stream mappings are solved exactly with
// a Hungarian assignment; ORC assignments via dynamic programming over stream
// positions. Aggregation across recordings sums counts, never averages rates.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsasr/diarization.hpp"
#include "tsasr/errors.hpp"

namespace tsasr {

constexpr double kInfCollar = std::numeric_limits<double>::infinity();

struct SegmentTranscript {
    std::string session_id;
    std::string speaker;
    double start_time = 0.0;
    double end_time = 0.0;
    std::vector<std::string> words;
    std::optional<std::vector<std::pair<double, double>>> word_times;

    void validate() const {
        require(end_time >= start_time, "SegmentTranscript: end before start");
        if (word_times) {
            require(word_times->size() == words.size(), "SegmentTranscript: word time count mismatch");
            double prev_end = start_time;
            for (const auto& [s, e] : *word_times) {
                require(s >= start_time - 1e-9 && e <= end_time + 1e-9, "SegmentTranscript: word time outside segment");
                require(s >= prev_end - 1e-9 && e >= s, "SegmentTranscript: word times overlap or regress");
                prev_end = e;
            }
        }
    }
};

struct WerCounts {
    int64_t substitutions = 0;
    int64_t insertions = 0;
    int64_t deletions = 0;
    int64_t ref_len = 0;

    int64_t errors() const { return substitutions + insertions + deletions; }

    // Empty reference with a nonempty hypothesis has no defined rate; an
    // infinity marker is reported.
    double rate() const {
        if (ref_len == 0) return errors() == 0 ? 0.0 : std::numeric_limits<double>::infinity();
        return static_cast<double>(errors()) / static_cast<double>(ref_len);
    }

    WerCounts& operator+=(const WerCounts& o) {
        substitutions += o.substitutions;
        insertions += o.insertions;
        deletions += o.deletions;
        ref_len += o.ref_len;
        return *this;
    }
};

struct TimedWord {
    std::string text;
    double start = 0.0;
    double end = 0.0;
    bool timed = false;
};

// ---------------------------------------------------------------------------
// JSON I/O (keys: session_id, speaker, start_time, end_time, words)
// ---------------------------------------------------------------------------

inline nlohmann::json segments_to_json(const std::vector<SegmentTranscript>& segs) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& s : segs) {
        nlohmann::json j = {{"session_id", s.session_id},
                            {"speaker", s.speaker},
                            {"start_time", s.start_time},
                            {"end_time", s.end_time},
                            {"words", s.words}};
        if (s.word_times) {
            nlohmann::json wt = nlohmann::json::array();
            for (const auto& [a, b] : *s.word_times) wt.push_back({a, b});
            j["word_times"] = std::move(wt);
        }
        arr.push_back(std::move(j));
    }
    return arr;
}

inline std::vector<SegmentTranscript> segments_from_json(const nlohmann::json& arr) {
    if (!arr.is_array()) throw ParseError("transcript json: expected a top-level array");
    std::vector<SegmentTranscript> out;
    for (size_t i = 0; i < arr.size(); ++i) {
        const auto& j = arr[i];
        try {
            SegmentTranscript s;
            s.session_id = j.at("session_id").get<std::string>();
            s.speaker = j.at("speaker").get<std::string>();
            s.start_time = j.at("start_time").get<double>();
            s.end_time = j.at("end_time").get<double>();
            s.words = j.at("words").get<std::vector<std::string>>();
            if (j.contains("word_times")) {
                std::vector<std::pair<double, double>> wt;
                for (const auto& e : j.at("word_times")) wt.emplace_back(e.at(0).get<double>(), e.at(1).get<double>());
                s.word_times = std::move(wt);
            }
            s.validate();
            out.push_back(std::move(s));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("transcript json: record " + std::to_string(i) + ": " + e.what());
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Word timing
// ---------------------------------------------------------------------------

// When only segment times exist the duration is divided equally among the
// words (pseudo word-level timing, the established scoring convention).
inline std::vector<TimedWord> timed_words(const SegmentTranscript& seg, bool need_times, bool interpolate = true) {
    std::vector<TimedWord> out;
    const int n = static_cast<int>(seg.words.size());
    for (int i = 0; i < n; ++i) {
        TimedWord w;
        w.text = seg.words[static_cast<size_t>(i)];
        if (seg.word_times) {
            w.start = (*seg.word_times)[static_cast<size_t>(i)].first;
            w.end = (*seg.word_times)[static_cast<size_t>(i)].second;
            w.timed = true;
        } else if (interpolate) {
            const double dur = seg.end_time - seg.start_time;
            w.start = seg.start_time + dur * i / n;
            w.end = seg.start_time + dur * (i + 1) / n;
            w.timed = true;
        } else if (need_times) {
            throw InputError("word times required but missing and interpolation disabled");
        }
        out.push_back(std::move(w));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Alignment
// ---------------------------------------------------------------------------

inline bool tc_feasible(const TimedWord& ref, const TimedWord& hyp, double collar) {
    if (std::isinf(collar)) return true;
    return std::max(ref.start - collar, hyp.start) <= std::min(ref.end + collar, hyp.end);
}

// Levenshtein with per-pair feasibility: when time constrained, a ref/hyp
// word pair may only align (match or substitute) if the hypothesis interval
// intersects the reference interval widened by the collar; otherwise the pair
// costs a deletion plus an insertion.
inline WerCounts align_words(const std::vector<TimedWord>& ref, const std::vector<TimedWord>& hyp,
                             bool time_constrained = false, double collar = kInfCollar) {
    const int R = static_cast<int>(ref.size()), H = static_cast<int>(hyp.size());
    std::vector<std::vector<int>> d(static_cast<size_t>(R) + 1, std::vector<int>(static_cast<size_t>(H) + 1, 0));
    for (int i = 0; i <= R; ++i) d[static_cast<size_t>(i)][0] = i;
    for (int j = 0; j <= H; ++j) d[0][static_cast<size_t>(j)] = j;
    for (int i = 1; i <= R; ++i) {
        for (int j = 1; j <= H; ++j) {
            int best = d[static_cast<size_t>(i) - 1][static_cast<size_t>(j)] + 1;            // deletion
            best = std::min(best, d[static_cast<size_t>(i)][static_cast<size_t>(j) - 1] + 1);  // insertion
            const bool ok = !time_constrained ||
                            tc_feasible(ref[static_cast<size_t>(i) - 1], hyp[static_cast<size_t>(j) - 1], collar);
            if (ok) {
                const int sub = ref[static_cast<size_t>(i) - 1].text == hyp[static_cast<size_t>(j) - 1].text ? 0 : 1;
                best = std::min(best, d[static_cast<size_t>(i) - 1][static_cast<size_t>(j) - 1] + sub);
            }
            d[static_cast<size_t>(i)][static_cast<size_t>(j)] = best;
        }
    }
    // deterministic backtrace: diagonal first, then deletion, then insertion
    WerCounts c;
    c.ref_len = R;
    int i = R, j = H;
    while (i > 0 || j > 0) {
        if (i > 0 && j > 0) {
            const bool ok = !time_constrained ||
                            tc_feasible(ref[static_cast<size_t>(i) - 1], hyp[static_cast<size_t>(j) - 1], collar);
            if (ok) {
                const int sub = ref[static_cast<size_t>(i) - 1].text == hyp[static_cast<size_t>(j) - 1].text ? 0 : 1;
                if (d[static_cast<size_t>(i)][static_cast<size_t>(j)] ==
                    d[static_cast<size_t>(i) - 1][static_cast<size_t>(j) - 1] + sub) {
                    c.substitutions += sub;
                    --i;
                    --j;
                    continue;
                }
            }
        }
        if (i > 0 && d[static_cast<size_t>(i)][static_cast<size_t>(j)] == d[static_cast<size_t>(i) - 1][static_cast<size_t>(j)] + 1) {
            c.deletions += 1;
            --i;
            continue;
        }
        c.insertions += 1;
        --j;
    }
    return c;
}

inline std::vector<TimedWord> untimed(const std::vector<std::string>& words) {
    std::vector<TimedWord> out;
    for (const auto& w : words) out.push_back({w, 0.0, 0.0, false});
    return out;
}

// Levenshtein-minimal substitution/insertion/deletion counts.
inline WerCounts wer(const std::vector<std::string>& ref, const std::vector<std::string>& hyp) {
    return align_words(untimed(ref), untimed(hyp), false);
}

// ---------------------------------------------------------------------------
// Hungarian assignment (min cost, square matrix, O(n^3) potentials method)
// ---------------------------------------------------------------------------

inline std::vector<int> hungarian(const std::vector<std::vector<double>>& cost) {
    const int n = static_cast<int>(cost.size());
    if (n == 0) return {};
    for (const auto& row : cost) require_dim(static_cast<int>(row.size()) == n, "hungarian: matrix must be square");
    const double kInf = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<size_t>(n) + 1, 0.0), v(static_cast<size_t>(n) + 1, 0.0);
    std::vector<int> p(static_cast<size_t>(n) + 1, 0), way(static_cast<size_t>(n) + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<size_t>(n) + 1, kInf);
        std::vector<char> used(static_cast<size_t>(n) + 1, false);
        do {
            used[static_cast<size_t>(j0)] = true;
            const int i0 = p[static_cast<size_t>(j0)];
            double delta = kInf;
            int j1 = 0;
            for (int j = 1; j <= n; ++j) {
                if (used[static_cast<size_t>(j)]) continue;
                const double cur = cost[static_cast<size_t>(i0) - 1][static_cast<size_t>(j) - 1] -
                                   u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
                if (cur < minv[static_cast<size_t>(j)]) {
                    minv[static_cast<size_t>(j)] = cur;
                    way[static_cast<size_t>(j)] = j0;
                }
                if (minv[static_cast<size_t>(j)] < delta) {
                    delta = minv[static_cast<size_t>(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[static_cast<size_t>(j)]) {
                    u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
                    v[static_cast<size_t>(j)] -= delta;
                } else {
                    minv[static_cast<size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<size_t>(j0)] != 0);
        do {
            const int j1 = way[static_cast<size_t>(j0)];
            p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<int> row_to_col(static_cast<size_t>(n), -1);
    for (int j = 1; j <= n; ++j)
        if (p[static_cast<size_t>(j)] > 0) row_to_col[static_cast<size_t>(p[static_cast<size_t>(j)]) - 1] = j - 1;
    return row_to_col;
}

// ---------------------------------------------------------------------------
// cpWER / tcpWER
// ---------------------------------------------------------------------------

struct SpeakerStream {
    std::string speaker;
    std::vector<TimedWord> words;
};

// Utterances are time-sorted per speaker before concatenation.
inline std::vector<SpeakerStream> speaker_streams(std::vector<SegmentTranscript> segs, bool need_times,
                                                  bool interpolate = true) {
    std::stable_sort(segs.begin(), segs.end(), [](const SegmentTranscript& a, const SegmentTranscript& b) {
        if (a.start_time != b.start_time) return a.start_time < b.start_time;
        return a.end_time < b.end_time;
    });
    std::vector<SpeakerStream> streams;
    std::map<std::string, size_t> index;
    for (const auto& seg : segs) {
        if (index.find(seg.speaker) == index.end()) {
            index[seg.speaker] = streams.size();
            streams.push_back({seg.speaker, {}});
        }
        auto ws = timed_words(seg, need_times, interpolate);
        auto& dst = streams[index[seg.speaker]].words;
        dst.insert(dst.end(), ws.begin(), ws.end());
    }
    return streams;
}

struct CpWerResult {
    WerCounts counts;
    double rate = 0.0;
    std::vector<std::pair<std::string, std::string>> mapping;  // ref speaker -> hyp speaker ("" = unpaired)
};

// Minimum over speaker<->stream bijections (the smaller side padded with
// empty streams) of the summed WER counts.
inline CpWerResult cp_wer_session(const std::vector<SegmentTranscript>& refs,
                                  const std::vector<SegmentTranscript>& hyps,
                                  bool time_constrained = false, double collar = 5.0) {
    auto ref_streams = speaker_streams(refs, time_constrained);
    auto hyp_streams = speaker_streams(hyps, time_constrained);
    const int n = std::max(ref_streams.size(), hyp_streams.size());
    CpWerResult res;
    if (n == 0) {
        res.rate = 0.0;
        return res;
    }
    while (static_cast<int>(ref_streams.size()) < n) ref_streams.push_back({"", {}});
    while (static_cast<int>(hyp_streams.size()) < n) hyp_streams.push_back({"", {}});

    std::vector<std::vector<WerCounts>> pair_counts(static_cast<size_t>(n), std::vector<WerCounts>(static_cast<size_t>(n)));
    std::vector<std::vector<double>> cost(static_cast<size_t>(n), std::vector<double>(static_cast<size_t>(n)));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            pair_counts[static_cast<size_t>(i)][static_cast<size_t>(j)] =
                align_words(ref_streams[static_cast<size_t>(i)].words, hyp_streams[static_cast<size_t>(j)].words,
                            time_constrained, collar);
            cost[static_cast<size_t>(i)][static_cast<size_t>(j)] =
                static_cast<double>(pair_counts[static_cast<size_t>(i)][static_cast<size_t>(j)].errors());
        }
    const std::vector<int> assign = hungarian(cost);
    for (int i = 0; i < n; ++i) {
        const int j = assign[static_cast<size_t>(i)];
        res.counts += pair_counts[static_cast<size_t>(i)][static_cast<size_t>(j)];
        if (!ref_streams[static_cast<size_t>(i)].speaker.empty() || !hyp_streams[static_cast<size_t>(j)].speaker.empty())
            res.mapping.emplace_back(ref_streams[static_cast<size_t>(i)].speaker, hyp_streams[static_cast<size_t>(j)].speaker);
    }
    res.rate = res.counts.rate();
    return res;
}

// ---------------------------------------------------------------------------
// ORC-WER / tcORC-WER
// ---------------------------------------------------------------------------

struct OrcResult {
    WerCounts counts;
    double rate = 0.0;
    std::vector<int> assignment;  // per reference utterance: hypothesis stream index
};

namespace detail {

// Edit cost of `utt` against every span h[start..e); returns cost[e - start].
inline std::vector<int> span_costs(const std::vector<TimedWord>& utt, const std::vector<TimedWord>& h,
                                   int start, bool tc, double collar) {
    const int U = static_cast<int>(utt.size());
    const int M = static_cast<int>(h.size()) - start;
    std::vector<int> prev(static_cast<size_t>(M) + 1), cur(static_cast<size_t>(M) + 1);
    for (int y = 0; y <= M; ++y) prev[static_cast<size_t>(y)] = y;
    for (int x = 1; x <= U; ++x) {
        cur[0] = x;
        for (int y = 1; y <= M; ++y) {
            int best = std::min(prev[static_cast<size_t>(y)] + 1, cur[static_cast<size_t>(y) - 1] + 1);
            const TimedWord& rw = utt[static_cast<size_t>(x) - 1];
            const TimedWord& hw = h[static_cast<size_t>(start + y) - 1];
            if (!tc || tc_feasible(rw, hw, collar))
                best = std::min(best, prev[static_cast<size_t>(y) - 1] + (rw.text == hw.text ? 0 : 1));
            cur[static_cast<size_t>(y)] = best;
        }
        std::swap(prev, cur);
    }
    return prev;
}

}  // namespace detail

// Minimum over assignments of each reference utterance to one hypothesis
// stream (order preserved within a stream) of the total WER. Dynamic program
// over per-stream hypothesis positions.
inline OrcResult orc_wer_session(std::vector<SegmentTranscript> ref_utts,
                                 const std::vector<SpeakerStream>& hyp_streams,
                                 bool time_constrained = false, double collar = 5.0) {
    require(!hyp_streams.empty(), "orc_wer: need at least one hypothesis stream");
    std::stable_sort(ref_utts.begin(), ref_utts.end(), [](const SegmentTranscript& a, const SegmentTranscript& b) {
        if (a.start_time != b.start_time) return a.start_time < b.start_time;
        return a.end_time < b.end_time;
    });
    const int K = static_cast<int>(hyp_streams.size());
    const int U = static_cast<int>(ref_utts.size());

    std::vector<int> dims(static_cast<size_t>(K));
    int64_t states = 1;
    for (int k = 0; k < K; ++k) {
        dims[static_cast<size_t>(k)] = static_cast<int>(hyp_streams[static_cast<size_t>(k)].words.size()) + 1;
        states *= dims[static_cast<size_t>(k)];
        require(states <= 8'000'000, "orc_wer: state space too large for exact DP");
    }
    auto unflatten = [&](int64_t s) {
        std::vector<int> pos(static_cast<size_t>(K));
        for (int k = K - 1; k >= 0; --k) {
            pos[static_cast<size_t>(k)] = static_cast<int>(s % dims[static_cast<size_t>(k)]);
            s /= dims[static_cast<size_t>(k)];
        }
        return pos;
    };
    auto flatten = [&](const std::vector<int>& pos) {
        int64_t s = 0;
        for (int k = 0; k < K; ++k) s = s * dims[static_cast<size_t>(k)] + pos[static_cast<size_t>(k)];
        return s;
    };

    const int kInf = std::numeric_limits<int>::max() / 4;
    std::vector<int> dist(static_cast<size_t>(states), kInf);
    dist[0] = 0;
    // back pointers per utterance layer for the assignment
    std::vector<std::vector<std::pair<int64_t, int>>> parents(static_cast<size_t>(U));

    std::vector<std::vector<TimedWord>> utt_words;
    for (const auto& u : ref_utts) utt_words.push_back(timed_words(u, time_constrained));

    for (int u = 0; u < U; ++u) {
        std::vector<int> next(static_cast<size_t>(states), kInf);
        parents[static_cast<size_t>(u)].assign(static_cast<size_t>(states), {-1, -1});
        for (int64_t s = 0; s < states; ++s) {
            if (dist[static_cast<size_t>(s)] >= kInf) continue;
            const std::vector<int> pos = unflatten(s);
            for (int k = 0; k < K; ++k) {
                const auto costs = detail::span_costs(utt_words[static_cast<size_t>(u)],
                                                      hyp_streams[static_cast<size_t>(k)].words,
                                                      pos[static_cast<size_t>(k)], time_constrained, collar);
                std::vector<int> npos = pos;
                for (int adv = 0; adv < static_cast<int>(costs.size()); ++adv) {
                    npos[static_cast<size_t>(k)] = pos[static_cast<size_t>(k)] + adv;
                    const int64_t ns = flatten(npos);
                    const int cand = dist[static_cast<size_t>(s)] + costs[static_cast<size_t>(adv)];
                    if (cand < next[static_cast<size_t>(ns)]) {
                        next[static_cast<size_t>(ns)] = cand;
                        parents[static_cast<size_t>(u)][static_cast<size_t>(ns)] = {s, k};
                    }
                }
            }
        }
        dist = std::move(next);
    }

    // close out trailing hypothesis words as insertions
    int best_total = kInf;
    int64_t best_state = 0;
    for (int64_t s = 0; s < states; ++s) {
        if (dist[static_cast<size_t>(s)] >= kInf) continue;
        const std::vector<int> pos = unflatten(s);
        int tail = 0;
        for (int k = 0; k < K; ++k) tail += dims[static_cast<size_t>(k)] - 1 - pos[static_cast<size_t>(k)];
        if (dist[static_cast<size_t>(s)] + tail < best_total) {
            best_total = dist[static_cast<size_t>(s)] + tail;
            best_state = s;
        }
    }

    OrcResult res;
    res.assignment.assign(static_cast<size_t>(U), 0);
    int64_t s = best_state;
    for (int u = U - 1; u >= 0; --u) {
        const auto [ps, k] = parents[static_cast<size_t>(u)][static_cast<size_t>(s)];
        require(ps >= 0, "orc_wer: broken back pointer");
        res.assignment[static_cast<size_t>(u)] = k;
        s = ps;
    }

    // recompute S/I/D by re-aligning each stream against its assigned
    // reference concatenation; the totals match the DP optimum
    for (int k = 0; k < K; ++k) {
        std::vector<TimedWord> ref_concat;
        for (int u = 0; u < U; ++u)
            if (res.assignment[static_cast<size_t>(u)] == k)
                ref_concat.insert(ref_concat.end(), utt_words[static_cast<size_t>(u)].begin(),
                                  utt_words[static_cast<size_t>(u)].end());
        res.counts += align_words(ref_concat, hyp_streams[static_cast<size_t>(k)].words, time_constrained, collar);
    }
    res.rate = res.counts.rate();
    return res;
}

// ---------------------------------------------------------------------------
// DER
// ---------------------------------------------------------------------------

struct DerResult {
    double der = 0.0;
    double miss = 0.0;       // seconds
    double false_alarm = 0.0;
    double confusion = 0.0;
    double total_ref_time = 0.0;
    bool defined = true;
    std::vector<std::pair<std::string, std::string>> mapping;
};

namespace detail {

using IntervalSet = std::vector<std::pair<double, double>>;

inline IntervalSet merge_intervals(IntervalSet xs) {
    std::sort(xs.begin(), xs.end());
    IntervalSet out;
    for (const auto& [s, e] : xs) {
        if (!out.empty() && s <= out.back().second)
            out.back().second = std::max(out.back().second, e);
        else
            out.emplace_back(s, e);
    }
    return out;
}

inline double overlap_duration(const IntervalSet& a, const IntervalSet& b) {
    double total = 0.0;
    size_t i = 0, j = 0;
    while (i < a.size() && j < b.size()) {
        const double lo = std::max(a[i].first, b[j].first);
        const double hi = std::min(a[i].second, b[j].second);
        if (hi > lo) total += hi - lo;
        if (a[i].second < b[j].second) ++i;
        else ++j;
    }
    return total;
}

}  // namespace detail

// Optimal speaker mapping (assignment on pairwise overlap durations), then a
// sweep over elementary intervals. The collar excludes +-collar around every
// reference segment boundary from scoring; default 0 scores everything.
inline DerResult der(const std::vector<DiarizationSegment>& ref, const std::vector<DiarizationSegment>& hyp,
                     double collar = 0.0) {
    std::map<std::string, detail::IntervalSet> ref_by_spk, hyp_by_spk;
    for (const auto& s : ref) ref_by_spk[s.speaker].emplace_back(s.start, s.end);
    for (const auto& s : hyp) hyp_by_spk[s.speaker].emplace_back(s.start, s.end);
    for (auto& [k, v] : ref_by_spk) v = detail::merge_intervals(std::move(v));
    for (auto& [k, v] : hyp_by_spk) v = detail::merge_intervals(std::move(v));

    std::vector<std::string> ref_spk, hyp_spk;
    for (const auto& [k, v] : ref_by_spk) ref_spk.push_back(k);
    for (const auto& [k, v] : hyp_by_spk) hyp_spk.push_back(k);

    // Hungarian on negated overlap durations gives the best ref->hyp mapping.
    const int n = static_cast<int>(std::max(ref_spk.size(), hyp_spk.size()));
    std::map<std::string, std::string> ref_to_hyp;
    DerResult res;
    if (n > 0 && !ref_spk.empty() && !hyp_spk.empty()) {
        std::vector<std::vector<double>> cost(static_cast<size_t>(n), std::vector<double>(static_cast<size_t>(n), 0.0));
        for (size_t i = 0; i < ref_spk.size(); ++i)
            for (size_t j = 0; j < hyp_spk.size(); ++j)
                cost[i][j] = -detail::overlap_duration(ref_by_spk[ref_spk[i]], hyp_by_spk[hyp_spk[j]]);
        const std::vector<int> assign = hungarian(cost);
        for (size_t i = 0; i < ref_spk.size(); ++i) {
            const int j = assign[i];
            if (j >= 0 && j < static_cast<int>(hyp_spk.size())) {
                ref_to_hyp[ref_spk[i]] = hyp_spk[static_cast<size_t>(j)];
                res.mapping.emplace_back(ref_spk[i], hyp_spk[static_cast<size_t>(j)]);
            }
        }
    }

    // event sweep over elementary intervals
    std::set<double> points;
    for (const auto& s : ref) {
        points.insert(s.start);
        points.insert(s.end);
        if (collar > 0.0) {
            points.insert(std::max(0.0, s.start - collar));
            points.insert(s.start + collar);
            points.insert(std::max(0.0, s.end - collar));
            points.insert(s.end + collar);
        }
    }
    for (const auto& s : hyp) {
        points.insert(s.start);
        points.insert(s.end);
    }
    detail::IntervalSet exclusions;
    if (collar > 0.0) {
        for (const auto& s : ref) {
            exclusions.emplace_back(s.start - collar, s.start + collar);
            exclusions.emplace_back(s.end - collar, s.end + collar);
        }
        exclusions = detail::merge_intervals(std::move(exclusions));
    }
    auto excluded = [&](double mid) {
        for (const auto& [a, b] : exclusions)
            if (mid >= a && mid < b) return true;
        return false;
    };

    const std::vector<double> pts(points.begin(), points.end());
    for (size_t pi = 0; pi + 1 < pts.size(); ++pi) {
        const double lo = pts[pi], hi = pts[pi + 1];
        const double mid = 0.5 * (lo + hi);
        const double dt = hi - lo;
        if (dt <= 0.0 || excluded(mid)) continue;
        int n_ref = 0, n_hyp = 0, n_correct = 0;
        auto active = [&](const detail::IntervalSet& xs) {
            for (const auto& [a, b] : xs)
                if (mid >= a && mid < b) return true;
            return false;
        };
        std::set<std::string> hyp_active;
        for (const auto& [spk, xs] : hyp_by_spk)
            if (active(xs)) {
                ++n_hyp;
                hyp_active.insert(spk);
            }
        for (const auto& [spk, xs] : ref_by_spk) {
            if (!active(xs)) continue;
            ++n_ref;
            auto it = ref_to_hyp.find(spk);
            if (it != ref_to_hyp.end() && hyp_active.count(it->second)) ++n_correct;
        }
        res.total_ref_time += n_ref * dt;
        res.miss += std::max(0, n_ref - n_hyp) * dt;
        res.false_alarm += std::max(0, n_hyp - n_ref) * dt;
        res.confusion += (std::min(n_ref, n_hyp) - n_correct) * dt;
    }

    if (res.total_ref_time <= 0.0) {
        res.defined = false;
        res.der = std::numeric_limits<double>::quiet_NaN();
    } else {
        res.der = (res.miss + res.false_alarm + res.confusion) / res.total_ref_time;
    }
    return res;
}

// ---------------------------------------------------------------------------
// Corpus-level aggregation (counts summed across sessions)
// ---------------------------------------------------------------------------

inline std::map<std::string, std::vector<SegmentTranscript>> group_by_session(const std::vector<SegmentTranscript>& segs) {
    std::map<std::string, std::vector<SegmentTranscript>> out;
    for (const auto& s : segs) out[s.session_id].push_back(s);
    return out;
}

struct CorpusWerReport {
    WerCounts aggregate;
    double rate = 0.0;
    std::map<std::string, WerCounts> per_session;
};

enum class WerMode { kCp, kOrc };

inline CorpusWerReport corpus_wer(const std::vector<SegmentTranscript>& refs, const std::vector<SegmentTranscript>& hyps,
                                  WerMode mode, bool time_constrained = false, double collar = 5.0) {
    auto ref_groups = group_by_session(refs);
    auto hyp_groups = group_by_session(hyps);
    CorpusWerReport report;
    std::set<std::string> sessions;
    for (const auto& [k, v] : ref_groups) sessions.insert(k);
    for (const auto& [k, v] : hyp_groups) sessions.insert(k);
    for (const auto& session : sessions) {
        const auto& r = ref_groups[session];
        const auto& h = hyp_groups[session];
        WerCounts counts;
        if (mode == WerMode::kCp) {
            counts = cp_wer_session(r, h, time_constrained, collar).counts;
        } else {
            auto streams = speaker_streams(h, time_constrained);
            if (streams.empty()) streams.push_back({"", {}});
            counts = orc_wer_session(r, streams, time_constrained, collar).counts;
        }
        report.per_session[session] = counts;
        report.aggregate += counts;
    }
    report.rate = report.aggregate.rate();
    return report;
}

}  // namespace tsasr
