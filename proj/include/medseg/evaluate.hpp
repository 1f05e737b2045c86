#pragma once

// Dataset-level evaluation: replays every conversation round through a
// predictor with ground-truth history, then scores masks (DSC/NSD per slot)
// and answers (closed accuracy / open recall).

#include "medseg/inference.hpp"
#include "medseg/metrics.hpp"

#include <json.hpp>

#include <functional>
#include <string>
#include <vector>

namespace medseg {

/// (image, conversation ending in a user turn) -> prediction.
using Predictor = std::function<Prediction(const ImageGrid&, const Conversation&)>;

template <class T>
Predictor model_predictor(const Model<T>& m, const Tokenizer& tok, int max_new_tokens = kDefaultMaxNewTokens) {
    return [&m, &tok, max_new_tokens](const ImageGrid& img, const Conversation& prefix) {
        return predict(m, tok, img, prefix, max_new_tokens);
    };
}

struct SampleOutcome {
    std::string image_id;
    bool text_exact = true;     // every assistant turn matched exactly
    bool slots_consistent = true; // every prediction had slot count == mask count
    std::size_t pred_slots = 0;
    std::size_t gt_slots = 0;
    std::vector<double> dsc;
    std::vector<std::string> answers;
    std::string error;
};

struct EvalReport {
    metrics::SegReport seg;
    metrics::VqaReport vqa;
    std::vector<SampleOutcome> samples;

    std::size_t exact_samples() const {
        std::size_t n = 0;
        for (const auto& s : samples) n += s.text_exact ? 1 : 0;
        return n;
    }
    bool all_slots_consistent() const {
        for (const auto& s : samples) {
            if (!s.slots_consistent) return false;
        }
        return true;
    }

    nlohmann::ordered_json to_json() const {
        const auto d = seg.dsc_stats();
        const auto n = seg.nsd_stats();
        nlohmann::ordered_json j{{"dsc_mean", d.mean},
                                 {"dsc_std", d.std},
                                 {"nsd_mean", n.mean},
                                 {"nsd_std", n.std},
                                 {"tau", seg.tau},
                                 {"closed_accuracy", vqa.closed_accuracy},
                                 {"open_recall", vqa.open_recall},
                                 {"slots", seg.dsc.size()},
                                 {"closed_count", vqa.closed_count},
                                 {"open_count", vqa.open_count},
                                 {"samples", samples.size()},
                                 {"exact_text_samples", exact_samples()},
                                 {"slot_mask_consistent", all_slots_consistent()}};
        return j;
    }
};

inline EvalReport evaluate_dataset(const std::vector<Sample>& data, const Predictor& predictor, double tau = 1.0) {
    if (data.empty()) throw EmptyEvalSet("evaluation set is empty");
    if (!(tau > 0)) throw InvalidArgument("nsd tolerance must be positive");
    EvalReport rep;
    rep.seg.tau = tau;
    std::vector<std::string> closed_pred;
    std::vector<std::string> closed_gt;
    double recall_sum = 0;

    for (const auto& s : data) {
        SampleOutcome o;
        o.image_id = s.image_id;
        o.gt_slots = s.masks.size();
        std::vector<BinaryMask> pred_masks;
        Conversation history;
        for (std::size_t i = 0; i + 1 < s.conversation.turns.size(); i += 2) {
            history.turns.push_back(s.conversation.turns[i]);
            const Turn& gt = s.conversation.turns[i + 1];
            std::string answer;
            try {
                Prediction p = predictor(s.image, history);
                if (p.masks.size() != p.grounded.slot_count()) o.slots_consistent = false;
                answer = p.text;
                if (serialize_grounded(p.grounded) != serialize_grounded(gt.content)) o.text_exact = false;
                for (auto& m : p.masks) pred_masks.push_back(std::move(m));
            } catch (const Error& e) {
                o.text_exact = false;
                o.slots_consistent = false;
                if (!o.error.empty()) o.error += "; ";
                o.error += e.what();
            }
            o.answers.push_back(answer);
            const std::string ref = plain_text(gt.content);
            if (metrics::is_closed_answer(ref)) {
                closed_pred.push_back(answer);
                closed_gt.push_back(ref);
            } else {
                recall_sum += metrics::open_recall(plain_text(parse_grounded(answer, ParseMode::lenient)), ref);
                ++rep.vqa.open_count;
            }
            history.turns.push_back(gt);
        }
        o.pred_slots = pred_masks.size();
        metrics::SegReport mine;
        mine.tau = tau;
        metrics::score_slots(pred_masks, s.masks, mine);
        o.dsc = mine.dsc;
        rep.seg.dsc.insert(rep.seg.dsc.end(), mine.dsc.begin(), mine.dsc.end());
        rep.seg.nsd.insert(rep.seg.nsd.end(), mine.nsd.begin(), mine.nsd.end());
        rep.samples.push_back(std::move(o));
    }
    rep.vqa.closed_count = closed_gt.size();
    if (!closed_gt.empty()) rep.vqa.closed_accuracy = metrics::closed_accuracy(closed_pred, closed_gt);
    if (rep.vqa.open_count) rep.vqa.open_recall = recall_sum / static_cast<double>(rep.vqa.open_count);
    return rep;
}

} // namespace medseg
