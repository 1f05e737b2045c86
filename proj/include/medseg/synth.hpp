#pragma once

// Deterministic generator of desk-scale "medical-like" samples: smooth noisy
// background, elliptical lesions with a fixed per-class intensity signature,
// and templated conversations that reference the lesions.
//
// Class signatures (mean foreground intensity, by class index):
//   0 nodule 0.92, 1 opacity 0.68 (striped texture), 2 cyst 0.12,
//   3 tumor 0.80, 4 (fifth class) 0.26.
// Background stays within roughly [0.32, 0.52].

#include "medseg/dataset.hpp"
#include "medseg/errors.hpp"
#include "medseg/grid.hpp"
#include "medseg/png_io.hpp"
#include "medseg/protocol.hpp"
#include "medseg/tokenizer.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

namespace medseg::synth {

inline constexpr std::array<float, 5> kClassIntensity = {0.92f, 0.68f, 0.12f, 0.80f, 0.26f};
inline constexpr int kMinLesionPixels = 16;
inline constexpr int kMaxPlacementAttempts = 100;
inline constexpr double kMaxPairIou = 0.2;

inline const std::string kExplicitTemplatePrefix = "Please segment the ";
inline const std::string kExplicitTemplateSuffix = " in the medical image";
inline const std::string kExplicitAnswer = "Sure, it is [SEG].";
inline const std::string kReasoningQuestion = "What possible conditions are indicated by this examination?";
inline const std::string kNegativeAnswer = "No abnormality is found in this image.";
inline const std::string kClosedQuestion = "Is there any lesion in the image?";
inline const std::string kClosedNegativeAnswer = "No.";

enum class Style { explicit_, reasoning, negative };

inline std::string_view to_string(Style s) {
    switch (s) {
    case Style::explicit_: return "explicit";
    case Style::reasoning: return "reasoning";
    case Style::negative: return "negative";
    }
    return "?";
}

inline Style style_from_string(std::string_view s) {
    if (s == "explicit") return Style::explicit_;
    if (s == "reasoning") return Style::reasoning;
    if (s == "negative") return Style::negative;
    throw UnknownStyle("'" + std::string(s) + "'");
}

struct TemplateMix {
    double explicit_ = 0.4;
    double reasoning = 0.4;
    double negative = 0.2;
};

struct SynthConfig {
    int num_samples = 16;
    int image_size = 64;
    std::vector<std::string> lesion_classes = default_lesion_classes();
    int max_lesions_per_image = 2;
    std::uint64_t seed = 0;
    TemplateMix template_mix;
    int patch_size = 8;

    void validate() const {
        if (num_samples <= 0) throw InvalidArgument("num_samples must be positive");
        if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0) {
            throw InvalidArgument("image_size must be a positive multiple of patch_size");
        }
        // the grounding encoder downsamples by 4
        if (image_size % 4 != 0) throw InvalidArgument("image_size must be divisible by 4");
        if (lesion_classes.empty() || lesion_classes.size() > kClassIntensity.size()) {
            throw InvalidArgument("between 1 and " + std::to_string(kClassIntensity.size()) + " lesion classes");
        }
        if (max_lesions_per_image < 1 || static_cast<std::size_t>(max_lesions_per_image) > lesion_classes.size()) {
            throw InvalidArgument("max_lesions_per_image must be in [1, #classes]");
        }
        const auto& m = template_mix;
        if (m.explicit_ < 0 || m.reasoning < 0 || m.negative < 0 ||
            std::abs(m.explicit_ + m.reasoning + m.negative - 1.0) > 1e-9) {
            throw InvalidArgument("template_mix fractions must be non-negative and sum to 1");
        }
    }
};

struct Lesion {
    int class_index = 0;
    std::string class_name;
    double center_row = 0;
    double center_col = 0;
    double radius_row = 0;
    double radius_col = 0;
    double angle = 0;

    bool contains(double r, double c) const {
        const double dr = r - center_row;
        const double dc = c - center_col;
        const double ca = std::cos(angle);
        const double sa = std::sin(angle);
        const double u = (dr * ca + dc * sa) / radius_row;
        const double v = (-dr * sa + dc * ca) / radius_col;
        return u * u + v * v <= 1.0;
    }
};

struct LesionLayout {
    std::vector<Lesion> lesions; // sorted left to right
};

/// Per-sample RNG stream derived from (seed, index) with splitmix64.
inline std::mt19937_64 sample_rng(std::uint64_t seed, std::uint64_t index) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    z ^= z >> 31;
    return std::mt19937_64(z);
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
    // std::uniform_real_distribution is implementation-defined; keep bit-stable.
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return lo + (hi - lo) * u;
}

inline int uniform_int(std::mt19937_64& rng, int lo, int hi_inclusive) {
    return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi_inclusive - lo + 1));
}

inline double gaussian(std::mt19937_64& rng) {
    // Box-Muller, for the same reason as uniform().
    const double u1 = std::max(uniform(rng, 0.0, 1.0), 1e-300);
    const double u2 = uniform(rng, 0.0, 1.0);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

inline BinaryMask rasterize(const Lesion& l, int size) {
    BinaryMask m(size, size);
    for (int r = 0; r < size; ++r) {
        for (int c = 0; c < size; ++c) {
            m(r, c) = l.contains(r + 0.5, c + 0.5) ? 1 : 0;
        }
    }
    return m;
}

inline double iou(const BinaryMask& a, const BinaryMask& b) {
    std::size_t inter = 0;
    std::size_t uni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        inter += (a.values[i] && b.values[i]) ? 1 : 0;
        uni += (a.values[i] || b.values[i]) ? 1 : 0;
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

namespace detail {

inline bool inside_frame(const Lesion& l, int size) {
    const double reach = std::max(l.radius_row, l.radius_col);
    return l.center_row - reach >= 0.5 && l.center_row + reach <= size - 0.5 && l.center_col - reach >= 0.5 &&
           l.center_col + reach <= size - 0.5;
}

inline void sort_left_to_right(std::vector<Lesion>& lesions) {
    std::stable_sort(lesions.begin(), lesions.end(), [](const Lesion& a, const Lesion& b) {
        if (a.center_col != b.center_col) return a.center_col < b.center_col;
        return a.center_row < b.center_row;
    });
}

} // namespace detail

/// Places one lesion per requested class. Throws LayoutInfeasible when no
/// valid placement is found within the attempt budget.
inline LesionLayout sample_layout(const std::vector<int>& class_indices, const std::vector<std::string>& class_names,
                                  int size, std::mt19937_64& rng) {
    const double scale = size / 64.0;
    for (int attempt = 0; attempt < kMaxPlacementAttempts; ++attempt) {
        LesionLayout layout;
        std::vector<BinaryMask> masks;
        bool ok = true;
        for (int cls : class_indices) {
            Lesion l;
            l.class_index = cls;
            l.class_name = class_names.at(static_cast<std::size_t>(cls));
            l.radius_row = uniform(rng, 4.0, 9.0) * scale;
            l.radius_col = uniform(rng, 4.0, 9.0) * scale;
            l.angle = uniform(rng, 0.0, std::numbers::pi);
            const double reach = std::max(l.radius_row, l.radius_col) + 0.5;
            l.center_row = uniform(rng, reach, size - reach);
            l.center_col = uniform(rng, reach, size - reach);
            auto m = rasterize(l, size);
            if (!detail::inside_frame(l, size) || foreground_count(m) < kMinLesionPixels) {
                ok = false;
                break;
            }
            for (const auto& other : masks) {
                if (iou(m, other) > 0.0) ok = false; // stricter than the IoU bound
            }
            for (const auto& other : layout.lesions) {
                if (std::abs(other.center_col - l.center_col) < 1.0) ok = false;
            }
            if (!ok) break;
            layout.lesions.push_back(l);
            masks.push_back(std::move(m));
        }
        if (ok) {
            detail::sort_left_to_right(layout.lesions);
            return layout;
        }
    }
    throw LayoutInfeasible("no valid placement after " + std::to_string(kMaxPlacementAttempts) + " attempts");
}

struct Rendered {
    ImageGrid image;
    std::vector<BinaryMask> masks; // parallel to layout.lesions
};

inline Rendered render_image(const LesionLayout& layout, int size, std::mt19937_64& rng) {
    Rendered out;
    for (const auto& l : layout.lesions) {
        if (l.class_index < 0 || static_cast<std::size_t>(l.class_index) >= kClassIntensity.size()) {
            throw InvalidArgument("lesion class index out of range");
        }
        if (!detail::inside_frame(l, size)) throw LayoutInfeasible("lesion extends outside the frame");
        out.masks.push_back(rasterize(l, size));
        if (foreground_count(out.masks.back()) < kMinLesionPixels) {
            throw LayoutInfeasible("lesion smaller than " + std::to_string(kMinLesionPixels) + " pixels");
        }
    }
    for (std::size_t a = 0; a < out.masks.size(); ++a) {
        for (std::size_t b = a + 1; b < out.masks.size(); ++b) {
            if (iou(out.masks[a], out.masks[b]) >= kMaxPairIou) throw LayoutInfeasible("lesions overlap");
        }
    }

    const double fr = uniform(rng, 1.0, 3.0);
    const double fc = uniform(rng, 1.0, 3.0);
    const double pr = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double pc = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    out.image = ImageGrid(size, size);
    for (int r = 0; r < size; ++r) {
        for (int c = 0; c < size; ++c) {
            const double y = static_cast<double>(r) / size;
            const double x = static_cast<double>(c) / size;
            double v = 0.42 + 0.05 * std::sin(2.0 * std::numbers::pi * fr * y + pr) +
                       0.03 * std::cos(2.0 * std::numbers::pi * fc * x + pc) + 0.012 * gaussian(rng);
            out.image(r, c) = static_cast<float>(v);
        }
    }
    // later lesions paint over earlier ones on the rare overlapping pixels
    for (std::size_t k = 0; k < layout.lesions.size(); ++k) {
        const auto& l = layout.lesions[k];
        const double base = kClassIntensity[static_cast<std::size_t>(l.class_index)];
        for (int r = 0; r < size; ++r) {
            for (int c = 0; c < size; ++c) {
                if (!out.masks[k](r, c)) continue;
                double v = base + 0.015 * gaussian(rng);
                if (l.class_index == 1) v += 0.03 * std::sin(1.3 * (r + c));
                out.image(r, c) = static_cast<float>(v);
            }
        }
    }
    for (auto& v : out.image.values) v = std::clamp(v, 0.0f, 1.0f);
    quantize_8bit(out.image);
    return out;
}

namespace detail {

inline std::string join_phrases(const std::vector<Lesion>& lesions) {
    std::string out;
    for (std::size_t i = 0; i < lesions.size(); ++i) {
        if (i > 0) out += (i + 1 == lesions.size()) ? " and " : ", ";
        out += "<p> " + lesions[i].class_name + " </p> [SEG]";
    }
    return out;
}

} // namespace detail

inline std::string explicit_question(const std::string& class_name) {
    return kExplicitTemplatePrefix + class_name + kExplicitTemplateSuffix;
}

/// Builds the conversation for a layout. `target` selects the lesion asked
/// about by explicit questions.
inline Conversation make_conversation(const LesionLayout& layout, Style style, std::size_t target = 0) {
    Conversation c;
    auto add = [&](Role r, const std::string& text) { c.turns.push_back(make_turn(r, text)); };
    switch (style) {
    case Style::explicit_:
        if (layout.lesions.empty()) throw InvalidArgument("explicit style needs at least one lesion");
        add(Role::user, explicit_question(layout.lesions.at(target).class_name));
        add(Role::assistant, kExplicitAnswer);
        break;
    case Style::reasoning:
        if (layout.lesions.empty()) throw InvalidArgument("reasoning style needs at least one lesion");
        add(Role::user, kReasoningQuestion);
        add(Role::assistant, "The image shows " + detail::join_phrases(layout.lesions) + ".");
        add(Role::user, explicit_question(layout.lesions.at(target).class_name));
        add(Role::assistant, kExplicitAnswer);
        break;
    case Style::negative:
        if (!layout.lesions.empty()) throw InvalidArgument("negative style needs a lesion-free layout");
        add(Role::user, kReasoningQuestion);
        add(Role::assistant, kNegativeAnswer);
        add(Role::user, kClosedQuestion);
        add(Role::assistant, kClosedNegativeAnswer);
        break;
    }
    return c;
}

/// Masks and class names in global slot order for a conversation built by
/// make_conversation.
inline void assign_slot_masks(const LesionLayout& layout, const Rendered& rendered, Style style, std::size_t target,
                              Sample& s) {
    auto push = [&](std::size_t k) {
        s.masks.push_back(rendered.masks[k]);
        s.class_names.push_back(layout.lesions[k].class_name);
    };
    if (style == Style::reasoning) {
        for (std::size_t k = 0; k < layout.lesions.size(); ++k) push(k);
    }
    if (style != Style::negative) push(target);
}

inline std::vector<Style> style_schedule(const SynthConfig& cfg, std::mt19937_64& rng) {
    const std::array<double, 3> frac = {cfg.template_mix.explicit_, cfg.template_mix.reasoning, cfg.template_mix.negative};
    std::array<int, 3> count{};
    std::array<double, 3> rem{};
    int assigned = 0;
    for (int k = 0; k < 3; ++k) {
        const double exact = frac[k] * cfg.num_samples;
        count[k] = static_cast<int>(std::floor(exact + 1e-9));
        rem[k] = exact - count[k];
        assigned += count[k];
    }
    // largest remainder, ties to the earlier style
    while (assigned < cfg.num_samples) {
        int best = 0;
        for (int k = 1; k < 3; ++k) {
            if (rem[k] > rem[best] + 1e-12) best = k;
        }
        ++count[best];
        rem[best] = -1.0;
        ++assigned;
    }
    std::vector<Style> out;
    const std::array<Style, 3> styles = {Style::explicit_, Style::reasoning, Style::negative};
    for (int k = 0; k < 3; ++k) out.insert(out.end(), static_cast<std::size_t>(count[k]), styles[k]);
    for (std::size_t i = out.size(); i > 1; --i) {
        std::swap(out[i - 1], out[static_cast<std::size_t>(rng() % i)]);
    }
    return out;
}

inline std::string sample_id(std::size_t index) {
    std::string digits = std::to_string(index);
    return "synth-" + std::string(digits.size() < 5 ? 5 - digits.size() : 0, '0') + digits;
}

/// One sample; a pure function of (cfg, index, style).
inline Sample generate_sample(const SynthConfig& cfg, std::size_t index, Style style) {
    auto rng = sample_rng(cfg.seed, index);
    std::vector<int> classes;
    if (style != Style::negative) {
        const int n = uniform_int(rng, 1, cfg.max_lesions_per_image);
        std::vector<int> pool(cfg.lesion_classes.size());
        for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = static_cast<int>(i);
        for (int i = 0; i < n; ++i) {
            const auto j = static_cast<std::size_t>(i) + static_cast<std::size_t>(rng() % (pool.size() - i));
            std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
            classes.push_back(pool[static_cast<std::size_t>(i)]);
        }
    }
    const auto layout = sample_layout(classes, cfg.lesion_classes, cfg.image_size, rng);
    const auto rendered = render_image(layout, cfg.image_size, rng);
    const std::size_t target =
        layout.lesions.empty() ? 0 : static_cast<std::size_t>(rng() % layout.lesions.size());

    Sample s;
    s.image_id = sample_id(index);
    s.image = rendered.image;
    s.conversation = make_conversation(layout, style, target);
    assign_slot_masks(layout, rendered, style, target, s);
    return s;
}

inline std::vector<Sample> generate_dataset(const SynthConfig& cfg) {
    cfg.validate();
    auto schedule_rng = sample_rng(cfg.seed, ~std::uint64_t{0});
    const auto styles = style_schedule(cfg, schedule_rng);
    std::vector<Sample> out;
    out.reserve(styles.size());
    for (std::size_t i = 0; i < styles.size(); ++i) {
        out.push_back(generate_sample(cfg, i, styles[i]));
        if (auto v = validate_sample(out.back()); !v.empty()) {
            throw Error("generated sample " + out.back().image_id + " is invalid: " + v.front().message);
        }
    }
    return out;
}

inline std::vector<Sample> generate_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
    auto samples = generate_dataset(cfg);
    write_dataset(out_dir, samples);
    return samples;
}

} // namespace medseg::synth
