#include "medseg/protocol.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <string>
#include <vector>

using namespace medseg;

namespace {

// Independent oracle: walks the string once, recording (phrase, is_bare) for
// every [SEG] occurrence by looking backwards for a closing </p>.
std::vector<std::pair<std::string, bool>> scan_slots(const std::string& s) {
    std::vector<std::pair<std::string, bool>> out;
    for (std::size_t i = 0; i + 5 <= s.size(); ++i) {
        if (s.compare(i, 5, "[SEG]") != 0) continue;
        std::size_t j = i;
        while (j > 0 && s[j - 1] == ' ') --j;
        if (j >= 4 && s.compare(j - 4, 4, "</p>") == 0) {
            std::size_t close = j - 4;
            std::size_t open = s.rfind("<p>", close);
            std::string phrase = s.substr(open + 3, close - open - 3);
            while (!phrase.empty() && phrase.front() == ' ') phrase.erase(phrase.begin());
            while (!phrase.empty() && phrase.back() == ' ') phrase.pop_back();
            out.emplace_back(phrase, false);
        } else {
            out.emplace_back("", true);
        }
    }
    return out;
}

std::string random_plain(std::mt19937& rng) {
    static const std::string alphabet = "ab <>p/[]SEG.\t,";
    for (;;) {
        std::string s;
        const int len = 1 + static_cast<int>(rng() % 8);
        for (int i = 0; i < len; ++i) s.push_back(alphabet[rng() % alphabet.size()]);
        if (!detail::contains_marker(s)) return s;
    }
}

GroundedText random_grounded(std::mt19937& rng) {
    GroundedText gt;
    const int n = static_cast<int>(rng() % 7);
    std::size_t slot = 0;
    bool prev_plain = false;
    for (int i = 0; i < n; ++i) {
        if (!prev_plain && rng() % 2 == 0) {
            gt.chunks.emplace_back(PlainText{random_plain(rng)});
            prev_plain = true;
        } else {
            std::string phrase = rng() % 3 == 0 ? "" : detail::trim(random_plain(rng));
            gt.chunks.emplace_back(SegSpan{phrase, slot++});
            prev_plain = false;
        }
    }
    return gt;
}

} // namespace

TEST_CASE("parse_grounded on the reference strings", "[protocol]") {
    SECTION("grounded phrase") {
        auto gt = parse_grounded("<p> covid-19 </p> [SEG]");
        REQUIRE(gt.chunks.size() == 1);
        CHECK(std::get<SegSpan>(gt.chunks[0]) == SegSpan{"covid-19", 0});
    }
    SECTION("bare slot inside a sentence") {
        auto gt = parse_grounded("Sure, it is [SEG].");
        REQUIRE(gt.chunks.size() == 3);
        CHECK(std::get<PlainText>(gt.chunks[0]).text == "Sure, it is ");
        CHECK(std::get<SegSpan>(gt.chunks[1]) == SegSpan{"", 0});
        CHECK(std::get<PlainText>(gt.chunks[2]).text == ".");
    }
    SECTION("no markers") {
        auto gt = parse_grounded("No abnormality found.");
        REQUIRE(gt.chunks.size() == 1);
        CHECK(gt.slot_count() == 0);
    }
    SECTION("two grounded spans agree with the character-scan oracle") {
        const std::string text = "a <p> nodule </p> [SEG] and a <p> cyst </p> [SEG]";
        auto spans = parse_grounded(text).spans();
        auto oracle = scan_slots(text);
        REQUIRE(spans.size() == oracle.size());
        REQUIRE(spans.size() == 2);
        for (std::size_t i = 0; i < spans.size(); ++i) {
            CHECK(spans[i].slot_index == i);
            CHECK(spans[i].phrase == oracle[i].first);
            CHECK(spans[i].phrase.empty() == oracle[i].second);
        }
        CHECK(spans[0].phrase == "nodule");
        CHECK(spans[1].phrase == "cyst");
    }
    SECTION("whitespace between </p> and [SEG] is flexible") {
        auto gt = parse_grounded("<p>cyst</p>\n\t [SEG]");
        CHECK(gt.spans().at(0).phrase == "cyst");
    }
}

TEST_CASE("malformed markup", "[protocol]") {
    CHECK_THROWS_AS(parse_grounded("<p> open only [SEG]"), MalformedMarkup);
    CHECK_THROWS_AS(parse_grounded("<p> a <p> b </p> [SEG]"), MalformedMarkup);
    CHECK_THROWS_AS(parse_grounded("stray </p> [SEG]"), MalformedMarkup);
    CHECK_THROWS_AS(parse_grounded("<p> no slot </p> after"), MalformedMarkup);

    SECTION("lenient mode keeps orphan markers as text") {
        auto gt = parse_grounded("stray </p> then [SEG]", ParseMode::lenient);
        REQUIRE(gt.slot_count() == 1);
        CHECK(std::get<PlainText>(gt.chunks[0]).text == "stray </p> then ");
        auto unclosed = parse_grounded("<p> open", ParseMode::lenient);
        CHECK(unclosed.slot_count() == 0);
        CHECK(serialize_grounded(unclosed) == "<p> open");
    }
}

TEST_CASE("serialize_grounded canonical form", "[protocol]") {
    CHECK(serialize_grounded(GroundedText{{SegSpan{"covid-19", 0}}}) == "<p> covid-19 </p> [SEG]");
    CHECK(serialize_grounded(GroundedText{}).empty());
    CHECK(serialize_grounded(GroundedText{{PlainText{"x "}, SegSpan{"", 0}}}) == "x [SEG]");
}

TEST_CASE("random grounded texts round-trip and slot counts match markers", "[protocol][property]") {
    std::mt19937 rng(20240611);
    for (int i = 0; i < 1000; ++i) {
        const auto gt = random_grounded(rng);
        REQUIRE(is_canonical(gt));
        const auto text = serialize_grounded(gt);
        const auto back = parse_grounded(text);
        REQUIRE(back == gt);

        std::size_t literal = 0;
        for (auto p = text.find("[SEG]"); p != std::string::npos; p = text.find("[SEG]", p + 1)) ++literal;
        REQUIRE(back.slot_count() == literal);
    }
}

TEST_CASE("count_seg_slots", "[protocol]") {
    Conversation one{{make_turn(Role::user, "Please segment the nodule in the medical image"),
                      make_turn(Role::assistant, "Sure, it is [SEG].")}};
    CHECK(count_seg_slots(one) == 1);

    Conversation plain{{make_turn(Role::user, "hello"), make_turn(Role::assistant, "No abnormality found.")}};
    CHECK(count_seg_slots(plain) == 0);

    Conversation three{{make_turn(Role::user, "q1"),
                        make_turn(Role::assistant, "<p> nodule </p> [SEG] and <p> cyst </p> [SEG]."),
                        make_turn(Role::user, "q2"), make_turn(Role::assistant, "Sure, it is [SEG].")}};
    CHECK(count_seg_slots(three) == 3);
}

namespace {

Sample fixture_sample() {
    Sample s;
    s.image_id = "fx";
    s.image = ImageGrid(64, 64, 0.5f);
    s.conversation = Conversation{{make_turn(Role::user, "Please segment the nodule in the medical image"),
                                   make_turn(Role::assistant, "Sure, it is [SEG].")}};
    s.masks.push_back(BinaryMask(64, 64));
    s.class_names = {"nodule"};
    return s;
}

bool has_kind(const std::vector<Violation>& v, ViolationKind k) {
    for (const auto& x : v) {
        if (x.kind == k) return true;
    }
    return false;
}

} // namespace

TEST_CASE("validate_sample", "[protocol]") {
    CHECK(validate_sample(fixture_sample()).empty());

    SECTION("slot/mask count mismatch") {
        auto s = fixture_sample();
        s.conversation.turns[1] = make_turn(Role::assistant, "<p> a </p> [SEG] <p> b </p> [SEG]");
        auto v = validate_sample(s);
        REQUIRE(v.size() == 1);
        CHECK(v[0].kind == ViolationKind::SlotMaskCountMismatch);
    }
    SECTION("mask shape mismatch") {
        auto s = fixture_sample();
        s.masks[0] = BinaryMask(32, 32);
        auto v = validate_sample(s);
        REQUIRE(v.size() == 1);
        CHECK(v[0].kind == ViolationKind::ShapeMismatch);
    }
    SECTION("role order and user slots") {
        auto s = fixture_sample();
        std::swap(s.conversation.turns[0], s.conversation.turns[1]);
        CHECK(has_kind(validate_sample(s), ViolationKind::RoleOrder));
        auto t = fixture_sample();
        t.conversation.turns[0] = make_turn(Role::user, "segment [SEG]");
        CHECK(has_kind(validate_sample(t), ViolationKind::UserTurnHasSlots));
    }
    SECTION("non-binary mask") {
        auto s = fixture_sample();
        s.masks[0].values[3] = 255;
        CHECK(has_kind(validate_sample(s), ViolationKind::NonBinaryMask));
    }
    SECTION("pure: repeated calls agree") {
        auto s = fixture_sample();
        s.class_names.clear();
        CHECK(validate_sample(s).size() == validate_sample(s).size());
        CHECK(has_kind(validate_sample(s), ViolationKind::ClassNameCountMismatch));
    }
}
