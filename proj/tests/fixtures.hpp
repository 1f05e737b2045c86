#pragma once

// Small hand-built samples for model-level tests.

#include "medseg/protocol.hpp"
#include "medseg/synth.hpp"

#include <cmath>

namespace fixture {

inline medseg::BinaryMask disc(int size, double r0, double c0, double radius) {
    medseg::BinaryMask m(size, size);
    for (int r = 0; r < size; ++r) {
        for (int c = 0; c < size; ++c) {
            if (std::hypot(r - r0, c - c0) <= radius) m(r, c) = 1;
        }
    }
    return m;
}

/// 16x16 image with two bright discs and a two-round, three-slot
/// conversation.
inline medseg::Sample tiny_sample() {
    using namespace medseg;
    Sample s;
    s.image_id = "tiny";
    s.image = ImageGrid(16, 16);
    auto rng = synth::sample_rng(99, 0);
    for (auto& v : s.image.values) v = static_cast<float>(0.4 + 0.1 * synth::uniform(rng, -1.0, 1.0));
    auto a = disc(16, 5, 4, 2.5);
    auto b = disc(16, 10, 11, 3.0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a.values[i]) s.image.values[i] = 0.9f;
        if (b.values[i]) s.image.values[i] = 0.15f;
    }
    s.conversation.turns = {
        make_turn(Role::user, "What possible conditions are indicated by this examination?"),
        make_turn(Role::assistant, "The image shows <p> nodule </p> [SEG] and <p> cyst </p> [SEG]."),
        make_turn(Role::user, "Please segment the nodule in the medical image"),
        make_turn(Role::assistant, "Sure, it is [SEG]."),
    };
    s.masks = {a, b, a};
    s.class_names = {"nodule", "cyst", "nodule"};
    return s;
}

} // namespace fixture
