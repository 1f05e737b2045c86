// medseg: umbrella command line.
//   gen-data | train | eval | serve | pipeline run|resume|status | validate
// Exit status: 0 success, 1 user error (bad input, invalid data), 2 internal error.

#include "medseg/evaluate.hpp"
#include "medseg/pipeline.hpp"
#include "medseg/serve.hpp"
#include "medseg/synth.hpp"
#include "medseg/training.hpp"

#include <CLI11.hpp>

#include <atomic>
#include <csignal>
#include <cstdlib>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;
using namespace medseg;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUser = 1;
constexpr int kExitInternal = 2;

std::atomic<bool> g_stop{false};

std::string version_text() {
    std::ostringstream o;
    o << "medseg " << MEDSEG_VERSION_STRING << " (C++" << (__cplusplus / 100 % 100) << ", Eigen " << EIGEN_WORLD_VERSION << "."
      << EIGEN_MAJOR_VERSION << "." << EIGEN_MINOR_VERSION << ", " << __VERSION__ << ")";
    return o.str();
}

/// Errors caused by the caller's input rather than by this program.
bool is_user_error(const std::exception& e) {
    return dynamic_cast<const InvalidArgument*>(&e) || dynamic_cast<const FormatError*>(&e) ||
           dynamic_cast<const IoError*>(&e) || dynamic_cast<const CorruptState*>(&e) ||
           dynamic_cast<const EmptyEvalSet*>(&e) || dynamic_cast<const ShapeError*>(&e) ||
           dynamic_cast<const MalformedMarkup*>(&e) || dynamic_cast<const UnknownStyle*>(&e) ||
           dynamic_cast<const LayoutInfeasible*>(&e) || dynamic_cast<const SequenceTooLong*>(&e);
}

Vocab vocab_for(const std::vector<Sample>& data) {
    std::set<std::string> words;
    for (const auto& w : default_lesion_classes()) words.insert(w);
    for (const auto& s : data) words.insert(s.class_names.begin(), s.class_names.end());
    return Vocab::build({words.begin(), words.end()});
}

int cmd_gen_data(const std::string& out, int n, std::uint64_t seed, int image_size, int max_lesions,
                 const std::vector<double>& mix) {
    synth::SynthConfig cfg;
    cfg.num_samples = n;
    cfg.seed = seed;
    cfg.image_size = image_size;
    cfg.max_lesions_per_image = max_lesions;
    if (!mix.empty()) {
        if (mix.size() != 3) throw InvalidArgument("--mix takes three fractions: explicit reasoning negative");
        cfg.template_mix = {mix[0], mix[1], mix[2]};
    }
    const auto samples = synth::generate_dataset(cfg, out);
    std::cout << "wrote " << samples.size() << " samples to " << out << "\n";
    return kExitOk;
}

struct TrainArgs {
    std::string data;
    std::string out;
    std::string model = "default";
    TrainConfig tc;
    LossWeights w;
};

int cmd_train(const TrainArgs& a) {
    const auto data = load_dataset(a.data);
    for (const auto& s : data) {
        if (auto v = validate_sample(s); !v.empty()) {
            throw InvalidArgument("sample " + s.image_id + ": " + std::string(to_string(v.front().kind)) + " " + v.front().message);
        }
    }
    const Tokenizer tok(vocab_for(data));
    ModelConfig mc;
    if (a.model == "default") {
        mc = ModelConfig::defaults(tok.vocab().size());
    } else if (a.model == "tiny") {
        mc = ModelConfig::tiny(tok.vocab().size());
    } else {
        throw InvalidArgument("--model must be default or tiny");
    }
    if (!data.empty()) mc.gcu.image_size = data.front().image.height;
    mc.seed = a.tc.seed;
    Model<float> m(mc);
    TrainConfig tc = a.tc;
    tc.checkpoint_dir = a.out;
    train(m, tok, data, tc, a.w, [](const LogRow& r) { std::cout << r.to_json().dump() << std::endl; });
    std::cout << "checkpoint: " << (fs::path(a.out) / kCheckpointName).string() << "\n";
    return kExitOk;
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir, double tau, int max_new, const std::string& out) {
    auto ck = load_checkpoint<float>(ckpt);
    const Tokenizer tok(ck.vocab);
    const auto data = load_dataset(data_dir);
    const auto rep = evaluate_dataset(data, model_predictor(ck.model, tok, max_new), tau);
    const auto text = rep.to_json().dump(2);
    std::cout << text << "\n";
    if (!out.empty()) fileio::write_atomic(out, text + "\n");
    return kExitOk;
}

int cmd_serve(std::string ckpt, const serve::ServerOptions& opt) {
    // the environment wins over the flag
    if (const char* env = std::getenv(serve::kCheckpointEnv); env && *env) ckpt = env;
    serve::ChatService svc;
    if (ckpt.empty()) {
        std::cerr << "warning: no checkpoint given (--ckpt or " << serve::kCheckpointEnv << "); /v1/chat will answer 503\n";
    } else {
        svc = serve::ChatService::from_checkpoint(ckpt);
    }
    serve::Server srv(svc, opt);
    const int bound = srv.bind();
    std::signal(SIGINT, [](int) { g_stop = true; });
    std::signal(SIGTERM, [](int) { g_stop = true; });
    std::thread watcher([&] {
        while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
        srv.stop();
    });
    std::cerr << "listening on http://" << opt.host << ":" << bound << " model " << (svc.loaded() ? svc.version() : "none") << "\n";
    srv.listen();
    g_stop = true;
    watcher.join();
    return kExitOk;
}

int cmd_validate(const std::string& dir) {
    const auto records = read_manifest(dir);
    std::size_t bad = 0;
    for (const auto& r : records) {
        std::vector<Violation> vs;
        try {
            vs = validate_sample(load_sample(dir, r));
        } catch (const Error& e) {
            std::cout << "sample " << r.image_id << ": unreadable: " << e.what() << "\n";
            ++bad;
            continue;
        }
        if (vs.empty()) continue;
        ++bad;
        for (const auto& v : vs) std::cout << v.location << ": " << to_string(v.kind) << ": " << v.message << "\n";
    }
    std::cout << records.size() - bad << "/" << records.size() << " samples valid\n";
    return bad == 0 ? kExitOk : kExitUser;
}

void print_summary(const pipeline::PipelineSummary& s) { std::cout << s.to_json().dump(2) << "\n"; }

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Grounded medical VQA toolkit: data, training, evaluation, annotation pipeline and service", "medseg"};
    app.require_subcommand(1);
    app.set_version_flag("--version", version_text());

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
    std::string gen_out;
    int gen_n = 16;
    std::uint64_t gen_seed = 0;
    int gen_size = 64;
    int gen_lesions = 2;
    std::vector<double> gen_mix;
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--n", gen_n, "Number of samples")->capture_default_str();
    gen->add_option("--seed", gen_seed, "Random seed")->capture_default_str();
    gen->add_option("--image-size", gen_size, "Image side in pixels")->capture_default_str();
    gen->add_option("--max-lesions", gen_lesions, "Lesions per image at most")->capture_default_str();
    gen->add_option("--mix", gen_mix, "Template fractions: explicit reasoning negative")->expected(3);

    // train
    auto* tr = app.add_subcommand("train", "Train a model on a dataset directory");
    TrainArgs ta;
    tr->add_option("--data", ta.data, "Dataset directory")->required();
    tr->add_option("--out", ta.out, "Output directory (checkpoint, vocab, metrics log)")->required();
    tr->add_option("--steps", ta.tc.steps, "Optimizer steps")->capture_default_str();
    tr->add_option("--seed", ta.tc.seed, "Seed for initialization and batching")->capture_default_str();
    tr->add_option("--lambda-t", ta.w.lambda_t, "Text loss weight")->capture_default_str();
    tr->add_option("--lambda-m", ta.w.lambda_m, "Mask loss weight")->capture_default_str();
    tr->add_option("--lr", ta.tc.learning_rate, "Peak learning rate")->capture_default_str();
    tr->add_option("--batch", ta.tc.batch_size, "Batch size")->capture_default_str();
    tr->add_option("--warmup", ta.tc.warmup_steps, "Linear warmup steps")->capture_default_str();
    tr->add_flag("--cosine", ta.tc.cosine_decay, "Cosine decay after warmup");
    tr->add_option("--eval-every", ta.tc.eval_every, "Log interval in steps")->capture_default_str();
    tr->add_option("--checkpoint-every", ta.tc.checkpoint_every, "Intermediate checkpoint interval (0: final only)");
    tr->add_option("--threads", ta.tc.threads, "Worker threads per batch")->capture_default_str();
    tr->add_option("--model", ta.model, "Model size: default or tiny")->capture_default_str();

    // eval
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    std::string ev_ckpt, ev_data, ev_out;
    double ev_tau = 1.0;
    int ev_max_new = kDefaultMaxNewTokens;
    ev->add_option("--ckpt", ev_ckpt, "Checkpoint file")->required();
    ev->add_option("--data", ev_data, "Dataset directory")->required();
    ev->add_option("--tau", ev_tau, "NSD tolerance in pixels")->capture_default_str();
    ev->add_option("--max-new-tokens", ev_max_new, "Generation budget per answer")->capture_default_str();
    ev->add_option("--out", ev_out, "Also write the report to this file");

    // serve
    auto* sv = app.add_subcommand("serve", "Run the HTTP chat service");
    std::string sv_ckpt;
    serve::ServerOptions sv_opt;
    sv->add_option("--ckpt", sv_ckpt, std::string("Checkpoint file ($") + serve::kCheckpointEnv + " takes precedence)");
    sv->add_option("--port", sv_opt.port, "Port")->capture_default_str();
    sv->add_option("--host", sv_opt.host, "Bind address")->capture_default_str();
    sv->add_option("--queue-depth", sv_opt.queue_depth, "Requests allowed to wait for the worker")->capture_default_str();
    sv->add_option("--cors-origin", sv_opt.cors_origin, "Value of Access-Control-Allow-Origin")->capture_default_str();

    // pipeline
    auto* pl = app.add_subcommand("pipeline", "Annotation pipeline");
    pl->require_subcommand(1);
    std::string pl_in, pl_out, pl_config;
    auto* pl_run = pl->add_subcommand("run", "Start or continue a run");
    pl_run->add_option("--in", pl_in, "Input dataset directory (masks required)")->required();
    pl_run->add_option("--out", pl_out, "Output directory")->required();
    pl_run->add_option("--config", pl_config, "Pipeline config JSON");
    auto* pl_resume = pl->add_subcommand("resume", "Continue a run with its recorded input and config");
    pl_resume->add_option("--out", pl_out, "Output directory of an earlier run")->required();
    pl_resume->add_option("--config", pl_config, "Replace the recorded config");
    auto* pl_status = pl->add_subcommand("status", "Summarize record states");
    pl_status->add_option("--out", pl_out, "Output directory of a run")->required();

    // validate
    auto* va = app.add_subcommand("validate", "Check a dataset against the format rules");
    std::string va_data;
    va->add_option("--data", va_data, "Dataset directory")->required();

    if (argc > 1 && argv[1][0] != '-') {
        const std::string name = argv[1];
        const auto subs = app.get_subcommands([](const CLI::App*) { return true; });
        if (std::none_of(subs.begin(), subs.end(), [&](const CLI::App* s) { return s->get_name() == name; })) {
            std::cerr << "error: unknown subcommand '" << name << "'\n\n" << app.help();
            return kExitUser;
        }
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        if (rc != 0) std::cerr << "\n" << app.help();
        return rc == 0 ? kExitOk : kExitUser;
    }

    try {
        if (*gen) return cmd_gen_data(gen_out, gen_n, gen_seed, gen_size, gen_lesions, gen_mix);
        if (*tr) return cmd_train(ta);
        if (*ev) return cmd_eval(ev_ckpt, ev_data, ev_tau, ev_max_new, ev_out);
        if (*sv) return cmd_serve(sv_ckpt, sv_opt);
        if (*va) return cmd_validate(va_data);
        if (*pl_run) {
            const auto cfg = pl_config.empty() ? pipeline::PipelineConfig{} : pipeline::load_config(pl_config);
            print_summary(pipeline::run_pipeline(pl_in, pl_out, cfg));
            return kExitOk;
        }
        if (*pl_resume) {
            auto info = pipeline::read_run_info(pl_out);
            if (!pl_config.empty()) info.config = pipeline::load_config(pl_config);
            print_summary(pipeline::run_pipeline(info.input_dir, pl_out, info.config));
            return kExitOk;
        }
        if (*pl_status) {
            print_summary(pipeline::pipeline_status(pl_out));
            return kExitOk;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return is_user_error(e) ? kExitUser : kExitInternal;
    }
    return kExitInternal;
}
