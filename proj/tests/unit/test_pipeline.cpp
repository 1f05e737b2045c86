#include "medseg/pipeline.hpp"

#include "fixtures.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <atomic>
#include <random>

using namespace medseg;
using namespace medseg::pipeline;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("medseg_pipeline_" + name);
    fs::remove_all(p);
    return p;
}

/// Synthetic records in the input format: masks present, no conversation.
std::vector<ManifestRecord> make_input(const fs::path& dir, int n, std::uint64_t seed = 1) {
    synth::SynthConfig cfg;
    cfg.num_samples = n;
    cfg.image_size = 32;
    cfg.seed = seed;
    auto samples = synth::generate_dataset(cfg);
    auto records = write_dataset(dir, samples);
    for (std::size_t i = 0; i < records.size(); ++i) {
        records[i].conversation = nlohmann::json::array();
        if (i % 3 == 0) records[i].source = "covid-ct";
    }
    fileio::write_bytes(dir / kManifestName, manifest_text(records));
    return records;
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = fileio::read_text(e.path());
    }
    return out;
}

Clock counter() {
    auto t = std::make_shared<std::int64_t>(1000);
    return [t] { return (*t)++; };
}

AnnotationRecord fresh(const std::string& id, std::vector<std::string> classes, const StageContext& ctx) {
    ManifestRecord m;
    m.image_id = id;
    m.image = "images/" + id + ".png";
    for (std::size_t k = 0; k < classes.size(); ++k) m.masks.push_back("masks/" + id + "_" + std::to_string(k) + ".png");
    m.class_names = std::move(classes);
    return ingest(m, ctx);
}

/// Records every prompt it is asked with; can be told to fail.
class RecordingAnnotator : public MockAnnotator {
public:
    std::vector<std::string> prompts;
    std::vector<std::string> prefixes;
    int fail_next = 0;
    std::string override_caption;
    std::string name() const override { return "recording"; }
    std::string generate_caption(const std::string& prefix, const std::string& prompt, const ImageRef& image) override {
        if (fail_next > 0) {
            --fail_next;
            throw AnnotatorUnavailable("down");
        }
        prompts.push_back(prompt);
        prefixes.push_back(prefix);
        if (!override_caption.empty()) return override_caption;
        return MockAnnotator::generate_caption(prefix, prompt, image);
    }
};

class DownReviewer : public ReviewProvider {
public:
    std::string name() const override { return "down"; }
    Verdict review(const AnnotationRecord&) override { throw ReviewerUnavailable("nobody on call"); }
};

std::vector<std::string> events(const AnnotationRecord& r) {
    std::vector<std::string> out;
    for (const auto& e : r.audit) out.push_back(e.event);
    return out;
}

} // namespace

TEST_CASE("prefix table", "[pipeline]") {
    PipelineConfig c;
    CHECK(c.prefix_for("covid-ct") ==
          "Imagine you are a professional AI chest CT imaging assistant. The doctor needs to diagnose COVID-19, and you "
          "are tasked with analyzing the image to provide detailed, effective, and accurate diagnostic advice.");
    CHECK(c.prefix_for("unknown-set") == kDefaultPrefix);
    c.prefixes.erase("default");
    CHECK(c.prefix_for("unknown-set").empty());
}

TEST_CASE("mock annotator templates", "[pipeline]") {
    CHECK(MockAnnotator::caption_for({}) == "No abnormality is found in this image.");
    CHECK(MockAnnotator::caption_for({"nodule"}) == "The image shows a nodule.");
    CHECK(MockAnnotator::caption_for({"edema", "nodule", "cyst"}) == "The image shows an edema, a nodule and a cyst.");
    CHECK(MockAnnotator::lesions_in("The image shows an edema, a nodule and a cyst.") ==
          std::vector<std::string>{"edema", "nodule", "cyst"});
    CHECK(MockAnnotator::lesions_in("Something else entirely.").empty());

    MockAnnotator m;
    const std::vector<std::string> qs{"What possible conditions are indicated by this examination?",
                                      "Is there any lesion in the image?", "Describe the image."};
    const auto c = m.generate_conversation(qs, "The image shows a nodule and a cyst.");
    REQUIRE(c.turns.size() == 6);
    CHECK(serialize_grounded(c.turns[1].content) == "The image shows <p> nodule </p> [SEG] and <p> cyst </p> [SEG].");
    CHECK(serialize_grounded(c.turns[3].content) == "Yes.");
    CHECK(serialize_grounded(c.turns[5].content) == "The image shows a nodule and a cyst.");
    CHECK(count_seg_slots(c) == 2);
    const auto neg = m.generate_conversation(qs, MockAnnotator::caption_for({}));
    CHECK(count_seg_slots(neg) == 0);
    CHECK(serialize_grounded(neg.turns[3].content) == "No.");
}

TEST_CASE("stage 1 captions", "[pipeline]") {
    PipelineConfig cfg;
    RecordingAnnotator client;
    StageContext ctx{client, cfg, counter()};
    std::vector<AnnotationRecord> none;
    stage1_captions(none, ctx);
    CHECK(none.empty());

    std::vector<AnnotationRecord> recs{fresh("a", {"nodule"}, ctx), fresh("b", {}, ctx)};
    recs[1].source = "covid-ct"; // prefix lookup uses the record's source
    client.fail_next = 1;
    stage1_captions(recs, ctx);
    CHECK(recs[0].status == Status::pending);
    CHECK(recs[0].stage == Stage::caption);
    CHECK(events(recs[0]) == std::vector<std::string>{"ingested", "annotator_unavailable"});
    CHECK(recs[1].caption == "No abnormality is found in this image.");
    CHECK(recs[1].status == Status::generated);
    CHECK(recs[1].attempts == 1);
    CHECK(client.prefixes.back() == kCovidCtPrefix);

    stage1_captions(recs, ctx);
    CHECK(recs[0].caption == "The image shows a nodule.");
    CHECK(recs[0].stage == Stage::refine);
    CHECK(recs[0].audit.back().actor == "annotator:recording");
    CHECK(recs[0].audit.back().timestamp > recs[0].audit.front().timestamp);
}

TEST_CASE("stage 2 refinement", "[pipeline]") {
    PipelineConfig cfg;
    RecordingAnnotator client;
    StageContext ctx{client, cfg, counter()};
    auto make = [&](const std::string& id) {
        std::vector<AnnotationRecord> v{fresh(id, {"cyst"}, ctx)};
        stage1_captions(v, ctx);
        return v;
    };

    SECTION("approve on the first pass") {
        auto v = make("a");
        ScriptedReviewer rev;
        stage2_refine(v, ctx, rev);
        CHECK(v[0].stage == Stage::conversation);
        CHECK(v[0].status == Status::approved);
        CHECK(v[0].attempts == 1);
    }
    SECTION("reject then approve the regenerated caption") {
        auto v = make("a");
        ScriptedReviewer rev(ScriptedReviewer::Script{{"a", {{false, "mention the size"}, {true, ""}}}});
        stage2_refine(v, ctx, rev);
        CHECK(v[0].stage == Stage::conversation);
        CHECK(v[0].attempts == 2);
        CHECK(events(v[0]) ==
              std::vector<std::string>{"ingested", "caption_generated", "rejected", "caption_regenerated", "approved"});
        REQUIRE(client.prompts.size() == 2);
        CHECK(client.prompts[1] == cfg.prompt + " mention the size");
    }
    SECTION("reject twice escalates, a manual caption resumes") {
        auto v = make("a");
        ScriptedReviewer rev(ScriptedReviewer::Script{{"a", {{false, "x"}, {false, "y"}}}});
        stage2_refine(v, ctx, rev);
        CHECK(v[0].status == Status::manual_required);
        CHECK(v[0].stage == Stage::refine);
        CHECK(v[0].attempts == 2);
        CHECK(v[0].terminal());
        ScriptedReviewer physician({}, {{"a", "The image shows a cyst."}});
        stage2_refine(v, ctx, physician);
        CHECK(v[0].status == Status::manual_done);
        CHECK(v[0].stage == Stage::conversation);
        CHECK(v[0].caption == "The image shows a cyst.");
        CHECK(v[0].attempts == 2);
    }
    SECTION("unavailable reviewer suspends once and resumes") {
        auto v = make("a");
        DownReviewer down;
        stage2_refine(v, ctx, down);
        stage2_refine(v, ctx, down);
        CHECK(v[0].status == Status::generated);
        CHECK(events(v[0]).back() == "reviewer_unavailable");
        CHECK(v[0].audit.size() == 3);
        ScriptedReviewer ok;
        stage2_refine(v, ctx, ok);
        CHECK(v[0].stage == Stage::conversation);
    }
    SECTION("annotator outage during regeneration") {
        auto v = make("a");
        ScriptedReviewer rev(ScriptedReviewer::Script{{"a", {{false, "x"}}}});
        client.fail_next = 5;
        stage2_refine(v, ctx, rev);
        CHECK(v[0].status == Status::rejected_once);
        client.fail_next = 0;
        stage2_refine(v, ctx, rev);
        CHECK(v[0].status == Status::approved);
        CHECK(v[0].attempts == 2);
    }
    SECTION("auto reviewer") {
        auto v = make("a");
        AutoReviewer all;
        CHECK(all.review(v[0]).approve);
        AutoReviewer never(0.0);
        const auto verdict = never.review(v[0]);
        CHECK_FALSE(verdict.approve);
        CHECK_FALSE(verdict.reason.empty());
        v[0].caption = "The image shows a nodule.";
        CHECK_FALSE(all.review(v[0]).approve); // misses the cyst
        CHECK_THROWS_AS(AutoReviewer(1.5), InvalidArgument);
    }
}

TEST_CASE("stage 3 conversations", "[pipeline]") {
    PipelineConfig cfg;
    MockAnnotator client;
    StageContext ctx{client, cfg, counter()};
    ScriptedReviewer rev;
    auto loader = [](std::size_t masks) {
        return [masks](const AnnotationRecord& r) {
            Sample s;
            s.image_id = r.image_id;
            s.image = ImageGrid(8, 8, 0.5f);
            for (std::size_t k = 0; k < masks; ++k) s.masks.push_back(BinaryMask(8, 8, 0));
            s.class_names = r.class_names;
            return s;
        };
    };
    auto prepare = [&](std::vector<std::string> classes) {
        std::vector<AnnotationRecord> v{fresh("a", std::move(classes), ctx)};
        stage1_captions(v, ctx);
        stage2_refine(v, ctx, rev);
        return v;
    };

    SECTION("one lesion gives one slot") {
        auto v = prepare({"nodule"});
        stage3_conversations(v, ctx, loader(1));
        CHECK(v[0].stage == Stage::done);
        REQUIRE(v[0].conversation);
        CHECK(count_seg_slots(*v[0].conversation) == 1);
    }
    SECTION("no lesion gives a valid zero-slot conversation") {
        auto v = prepare({});
        stage3_conversations(v, ctx, loader(0));
        CHECK(v[0].stage == Stage::done);
        CHECK(count_seg_slots(*v[0].conversation) == 0);
    }
    SECTION("slot and mask counts disagree") {
        auto v = prepare({"nodule", "cyst"});
        v[0].class_names = {"nodule"}; // the caption names two lesions, the loader has one mask
        stage3_conversations(v, ctx, loader(1));
        CHECK(v[0].status == Status::manual_required);
        CHECK(v[0].stage == Stage::conversation);
        CHECK(v[0].terminal());
        const auto& last = v[0].audit.back();
        CHECK(last.event == "validation_failed");
        CHECK(last.data.at("violations").at(0).at("kind") == "SlotMaskCountMismatch");
    }
}

TEST_CASE("only listed transitions are reachable", "[pipeline][property]") {
    PipelineConfig cfg;
    MockAnnotator client;
    StageContext ctx{client, cfg, counter()};
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 300; ++trial) {
        ScriptedReviewer::Script script;
        std::vector<Verdict> vs;
        for (int k = 0; k < 2; ++k) vs.push_back({(rng() & 1) == 0, "r" + std::to_string(k)});
        script["a"] = vs;
        std::map<std::string, std::string> manual;
        if (rng() & 1) manual["a"] = "The image shows a nodule.";
        ScriptedReviewer rev(script, manual);
        std::vector<AnnotationRecord> v{fresh("a", {"nodule"}, ctx)};
        stage1_captions(v, ctx);
        stage2_refine(v, ctx, rev);
        const auto& r = v[0];
        CHECK(r.attempts <= 2);
        const auto ev = events(r);
        const auto rejections = std::count(ev.begin(), ev.end(), "rejected");
        if (vs[0].approve) {
            CHECK(r.status == Status::approved);
            CHECK(r.attempts == 1);
        } else if (vs[1].approve) {
            CHECK(r.status == Status::approved);
            CHECK(r.attempts == 2);
        } else {
            CHECK(rejections == 2);
            CHECK(r.status == (manual.empty() ? Status::manual_required : Status::manual_done));
        }
        CHECK(replay("a", r.audit) == r);
    }

    SECTION("illegal events are refused") {
        std::vector<AnnotationRecord> v{fresh("a", {"nodule"}, ctx)};
        auto r = v[0];
        CHECK_THROWS_AS(apply_event(r, "a", {1, "approved", "x", {}}), CorruptState);
        CHECK_THROWS_AS(apply_event(r, "a", {1, "caption_regenerated", "x", {{"caption", "c"}}}), CorruptState);
        CHECK_THROWS_AS(apply_event(r, "a", {1, "manual_caption", "x", {{"caption", "c"}}}), CorruptState);
        CHECK_THROWS_AS(apply_event(r, "a", {1, "ingested", "x", {}}), CorruptState);
        CHECK_THROWS_AS(apply_event(r, "a", {1, "teleport", "x", {}}), CorruptState);
        apply_event(r, "a", {2, "caption_generated", "x", {{"caption", "c"}}});
        apply_event(r, "a", {3, "rejected", "x", {{"reason", "no"}}});
        apply_event(r, "a", {4, "caption_regenerated", "x", {{"caption", "c2"}}});
        apply_event(r, "a", {5, "rejected", "x", {{"reason", "no"}}});
        CHECK(r.status == Status::manual_required);
        CHECK_THROWS_AS(apply_event(r, "a", {6, "caption_regenerated", "x", {{"caption", "c3"}}}), CorruptState);
        CHECK(r.attempts == 2);
    }
}

TEST_CASE("run_pipeline end to end", "[pipeline][run]") {
    const auto in = scratch("in");
    const auto out = scratch("out");
    const auto input = make_input(in, 20);
    PipelineConfig cfg;
    ScriptedReviewer::Script script;
    for (std::size_t i = 0; i < input.size(); i += 3) script[input[i].image_id] = {{false, "add detail"}};
    script[input[1].image_id] = {{false, "a"}, {false, "b"}};
    ScriptedReviewer rev(script);
    MockAnnotator client;

    const auto s = run_pipeline(in, out, cfg, client, rev, counter());
    CHECK(s.total == 20);
    CHECK(s.complete());
    CHECK(s.manual_required == 1);
    CHECK(s.done == 19);

    const auto states = load_states(out);
    REQUIRE(states.size() == 20);
    for (const auto& r : states) {
        CHECK(r.terminal());
        CHECK(r.attempts <= 2);
    }
    // replay from the shared log alone
    const auto replayed = replay_audit(out);
    REQUIRE(replayed.size() == states.size());
    for (const auto& r : states) CHECK(replayed.at(r.image_id) == r);

    // the output is a valid dataset
    const auto data = load_dataset(out);
    CHECK(data.size() == 19);
    for (const auto& smp : data) CHECK(validate_sample(smp).empty());

    const auto before = snapshot(out);
    const auto s2 = run_pipeline(in, out, cfg, client, rev, counter());
    CHECK(snapshot(out) == before);
    CHECK(s2.to_json() == s.to_json());
    CHECK(pipeline_status(out).to_json() == s.to_json());

    SECTION("corrupt state fails fast") {
        fileio::write_bytes(state_path(out, input[0].image_id), std::string("{not json"));
        CHECK_THROWS_AS(run_pipeline(in, out, cfg, client, rev, counter()), CorruptState);
    }
    SECTION("state edited behind the log's back") {
        auto j = nlohmann::json::parse(fileio::read_text(state_path(out, input[0].image_id)));
        j["attempts"] = 2;
        fileio::write_bytes(state_path(out, input[0].image_id), j.dump());
        CHECK_THROWS_AS(run_pipeline(in, out, cfg, client, rev, counter()), CorruptState);
    }
    SECTION("a lost audit tail is restored from the state files") {
        auto lines = fileio::read_lines(out / kAuditName);
        lines.pop_back();
        std::string text;
        for (const auto& l : lines) text += l + "\n";
        fileio::write_bytes(out / kAuditName, text);
        run_pipeline(in, out, cfg, client, rev, counter());
        CHECK(fileio::read_lines(out / kAuditName).size() == lines.size() + 1);
        for (const auto& r : states) CHECK(replay_audit(out).at(r.image_id) == r);
    }
    fs::remove_all(in);
    fs::remove_all(out);
}

TEST_CASE("run_pipeline on an empty dataset", "[pipeline][run]") {
    const auto in = scratch("empty_in");
    const auto out = scratch("empty_out");
    fs::create_directories(in);
    fileio::write_bytes(in / kManifestName, std::string_view{});
    const auto s = run_pipeline(in, out, PipelineConfig{}, counter());
    CHECK(s.total == 0);
    CHECK(fileio::read_text(out / kManifestName).empty());
    fs::remove_all(in);
    fs::remove_all(out);
}

TEST_CASE("input masks must exist before anything runs", "[pipeline][run]") {
    const auto in = scratch("nomask_in");
    const auto out = scratch("nomask_out");
    const auto recs = make_input(in, 6);
    const auto it = std::find_if(recs.begin(), recs.end(), [](const auto& r) { return !r.masks.empty(); });
    REQUIRE(it != recs.end());
    fs::remove(in / it->masks.front());
    CHECK_THROWS_AS(run_pipeline(in, out, PipelineConfig{}, counter()), IoError);
    CHECK_FALSE(fs::exists(out / kAuditName));
    fs::remove_all(in);
    fs::remove_all(out);
}

TEST_CASE("file queue review round trip", "[pipeline][run]") {
    const auto in = scratch("fq_in");
    const auto out = scratch("fq_out");
    const auto input = make_input(in, 4, 3);
    PipelineConfig cfg;
    cfg.reviewer_kind = "file_queue";

    auto s = run_pipeline(in, out, cfg, counter());
    CHECK(s.in_progress == 4);
    auto pending = fileio::read_lines(out / kPendingReviewsName);
    CHECK(pending.size() == 4);
    // a second pass without verdicts exports nothing new
    run_pipeline(in, out, cfg, counter());
    CHECK(fileio::read_lines(out / kPendingReviewsName).size() == 4);

    std::string verdicts;
    verdicts += nlohmann::json{{"image_id", input[0].image_id}, {"verdict", "approve"}}.dump() + "\n";
    verdicts += nlohmann::json{{"image_id", input[1].image_id}, {"verdict", "reject"}, {"reason", "too vague"}}.dump() + "\n";
    verdicts += nlohmann::json{{"image_id", input[2].image_id}, {"verdict", "reject"}, {"reason", "r1"}}.dump() + "\n";
    verdicts += nlohmann::json{{"image_id", input[2].image_id}, {"verdict", "reject"}, {"reason", "r2"}}.dump() + "\n";
    fileio::write_bytes(out / kVerdictsName, verdicts);
    s = resume_pipeline(out, counter());
    const auto st = load_states(out);
    auto find = [&](const std::string& id) {
        return *std::find_if(st.begin(), st.end(), [&](const auto& r) { return r.image_id == id; });
    };
    CHECK(find(input[0].image_id).stage == Stage::done);
    CHECK(find(input[1].image_id).status == Status::regenerated); // waiting on the second review
    CHECK(find(input[2].image_id).status == Status::manual_required);
    CHECK(find(input[3].image_id).status == Status::generated);

    fileio::append_line(out / kVerdictsName,
                        nlohmann::json{{"image_id", input[2].image_id}, {"verdict", "manual"},
                                       {"caption", MockAnnotator::caption_for(find(input[2].image_id).class_names)}}
                            .dump());
    fileio::append_line(out / kVerdictsName, nlohmann::json{{"image_id", input[1].image_id}, {"verdict", "approve"}, {"attempt", 2}}.dump());
    fileio::append_line(out / kVerdictsName, nlohmann::json{{"image_id", input[3].image_id}, {"verdict", "approve"}}.dump());
    s = resume_pipeline(out, counter());
    CHECK(s.done == 4);
    CHECK(s.complete());
    CHECK(load_states(out)[2].status == Status::manual_done);
    fs::remove_all(in);
    fs::remove_all(out);
}

TEST_CASE("pipeline config", "[pipeline]") {
    const auto c = PipelineConfig::from_json(nlohmann::json::parse(R"({
        "annotator": {"kind": "http", "endpoint": "http://127.0.0.1:1/a", "timeout_s": 2},
        "reviewer": {"kind": "auto", "accept_rate": 0.7},
        "prefixes": {"ct": "P"},
        "question_list": ["Q1"]})"));
    CHECK(c.annotator_kind == "http");
    CHECK(c.http.timeout_s == 2.0);
    CHECK(c.accept_rate == 0.7);
    CHECK(c.prefix_for("ct") == "P");
    CHECK(c.prefix_for("covid-ct") == kCovidCtPrefix);
    CHECK(c.question_list == std::vector<std::string>{"Q1"});
    CHECK(PipelineConfig::from_json(nlohmann::json::parse(c.to_json().dump())).to_json() == c.to_json());
    CHECK_THROWS_AS(PipelineConfig::from_json(nlohmann::json::parse(R"({"annotator": {"kind": "gpt"}})")), InvalidArgument);
    CHECK_THROWS_AS(PipelineConfig::from_json(nlohmann::json::parse(R"({"reviewer": {"accept_rate": 2}})")), InvalidArgument);
    CHECK_THROWS_AS(PipelineConfig::from_json(nlohmann::json::parse(R"({"question_list": []})")), InvalidArgument);
}

TEST_CASE("http annotator", "[pipeline][http]") {
    httplib::Server srv;
    std::atomic<int> caption_calls{0};
    srv.Post("/ann/caption", [&](const httplib::Request& req, httplib::Response& res) {
        if (caption_calls++ < 2) {
            res.status = 503;
            return;
        }
        const auto j = nlohmann::json::parse(req.body);
        res.set_content(nlohmann::json{{"caption", "seen " + j.at("image_id").get<std::string>() + " with " +
                                                       j.at("prefix").get<std::string>()}}
                            .dump(),
                        "application/json");
    });
    srv.Post("/ann/conversation", [&](const httplib::Request& req, httplib::Response& res) {
        const auto j = nlohmann::json::parse(req.body);
        if (j.at("caption") == "bad") {
            res.set_content(R"({"conversation": [{"role": "assistant", "text": "hi"}]})", "application/json");
            return;
        }
        res.set_content(R"({"conversation": [{"role": "user", "text": "q"}, {"role": "assistant", "text": "<p> x </p> [SEG]"}]})",
                        "application/json");
    });
    const int port = srv.bind_to_any_port("127.0.0.1");
    std::thread th([&] { srv.listen_after_bind(); });
    srv.wait_until_ready();

    HttpAnnotatorOptions o;
    o.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/ann";
    o.timeout_s = 5;
    o.backoff_s = 0.01;
    HttpAnnotator h(o);
    CHECK(h.generate_caption("P", "Q", ImageRef{"img1", {}, {}, ""}) == "seen img1 with P");
    CHECK(caption_calls == 3);
    const auto c = h.generate_conversation({"q"}, "ok");
    CHECK(count_seg_slots(c) == 1);
    CHECK_THROWS_AS(h.generate_conversation({"q"}, "bad"), AnnotatorUnavailable);

    caption_calls = -10; // every attempt fails
    o.retries = 3;
    HttpAnnotator h2(o);
    CHECK_THROWS_AS(h2.generate_caption("P", "Q", ImageRef{"img1", {}, {}, ""}), AnnotatorUnavailable);
    CHECK(caption_calls == -6); // first try plus three retries

    srv.stop();
    th.join();

    o.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/ann";
    o.retries = 1;
    HttpAnnotator gone(o);
    CHECK_THROWS_AS(gone.generate_caption("P", "Q", ImageRef{"x", {}, {}, ""}), AnnotatorUnavailable);
    CHECK_THROWS_AS(HttpAnnotator(HttpAnnotatorOptions{"not a url"}), InvalidArgument);
}
