// tractlab: command line front end for the toy judge experiments.
//
// Exit codes: 0 ok, 1 config or input error, 2 pipeline error,
// 3 degenerate model.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "tract/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tract;

namespace {

enum class Kind { Int, Real, Str, IntList, RealList };

struct Mirror {
    const char* flag;
    std::vector<const char*> pointers;
    Kind kind;
    const char* help;
};

const std::vector<Mirror>& mirrors() {
    static const std::vector<Mirror> m{
        {"--out", {"/output_dir"}, Kind::Str, "output directory"},
        {"--seeds", {"/seeds"}, Kind::IntList, "comma-separated run seeds"},
        {"--train-size", {"/data/train"}, Kind::Int, "training examples"},
        {"--test-size", {"/data/test"}, Kind::Int, "held-out examples"},
        {"--pairs", {"/data/pairs"}, Kind::Int, "pairwise test pairs"},
        {"--gen-seed", {"/generator/seed"}, Kind::Int, "data generator seed"},
        {"--style-prob", {"/generator/style_prob"}, Kind::Real, "annotation style-token rate"},
        {"--style-tokens", {"/generator/annotation_style_tokens"}, Kind::Int, "style vocabulary size"},
        {"--pretrain-steps", {"/pretrain/steps"}, Kind::Int, "seed-model steps"},
        {"--corpus-size", {"/corpus_size"}, Kind::Int, "seed-model corpus sequences"},
        {"--seed-checkpoint", {"/seed_checkpoint"}, Kind::Str, "reuse this seed model"},
        {"--objective", {"/stage1/objective"}, Kind::Str, "training objective (train)"},
        {"--lambda", {"/stage1/lambda", "/stage2/lambda"}, Kind::Real, "squared-term weight"},
        {"--epochs", {"/stage1/epochs", "/stage2/epochs"}, Kind::Int, "epochs per stage"},
        {"--lr", {"/stage1/learning_rate", "/stage2/learning_rate"}, Kind::Real, "learning rate"},
        {"--method", {"/predictor/method"}, Kind::Str, "inference method"},
        {"--k", {"/predictor/k"}, Kind::Int, "CoT samples per prediction"},
        {"--projection", {"/predictor/projection", "/stage1/projection", "/stage2/projection"}, Kind::Str,
         "raw | renormalized"},
        {"--top-p", {"/predictor/sampling/top_p", "/self_data/sampling/top_p"}, Kind::Real, "nucleus mass"},
        {"--temperature", {"/predictor/sampling/temperature", "/self_data/sampling/temperature"}, Kind::Real,
         "sampling temperature"},
        {"--lambda-grid", {"/lambda_grid"}, Kind::RealList, "sweep_lambda grid"},
        {"--k-grid", {"/k_grid"}, Kind::IntList, "scale_cots grid"},
    };
    return m;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

json flag_value(const Mirror& m, const std::string& raw) {
    try {
        switch (m.kind) {
            case Kind::Int: return std::stoll(raw);
            case Kind::Real: return std::stod(raw);
            case Kind::Str: return raw;
            case Kind::IntList: {
                json a = json::array();
                for (const auto& s : split_list(raw)) a.push_back(std::stoull(s));
                return a;
            }
            case Kind::RealList: {
                json a = json::array();
                for (const auto& s : split_list(raw)) a.push_back(std::stod(s));
                return a;
            }
        }
    } catch (const std::logic_error&) {
    }
    throw ConfigError(std::string(m.flag) + ": cannot parse '" + raw + "'");
}

// Flags, positional recipe name and --config for one subcommand.
struct Options {
    std::string config_path;
    std::map<std::string, std::string> raw;

    void attach(CLI::App* app) {
        app->add_option("--config", config_path, "experiment config (JSON); wins over flags");
        for (const auto& m : mirrors()) app->add_option(m.flag, raw[m.flag], m.help);
    }

    ExperimentConfig resolve(const std::string& recipe = "") const {
        json flags = json::object();
        for (const auto& m : mirrors()) {
            const auto it = raw.find(m.flag);
            if (it == raw.end() || it->second.empty()) continue;
            for (const char* p : m.pointers) flags[json::json_pointer(p)] = flag_value(m, it->second);
        }
        if (!recipe.empty()) flags["recipe"] = recipe;

        json merged = json(ExperimentConfig{});
        merged.merge_patch(flags);
        if (!config_path.empty()) {
            std::ifstream in(config_path);
            if (!in) throw ConfigError("cannot open config " + config_path);
            std::stringstream ss;
            ss << in.rdbuf();
            parse_config(ss.str(), config_path);  // line diagnostics and key check
            const json file = json::parse(ss.str());
            for (const auto& key : overlapping_keys(flags, file)) {
                std::cerr << "warning: " << config_path << " sets " << key
                          << ", overriding the command-line value\n";
            }
            merged.merge_patch(file);
        }
        return parse_config(merged.dump(), config_path.empty() ? "<flags>" : config_path);
    }
};

void progress(const std::string& msg) { std::cerr << "[tractlab] " << msg << '\n'; }

ScoreSpace space_of(const ExperimentConfig& c) { return Vocabulary(c.generator).score_space(); }

void print_rows(const std::vector<ReportRow>& rows) { std::cout << report_csv(rows); }

void print_analysis(const std::vector<AnalysisRow>& rows) {
    if (!rows.empty()) std::cout << analysis_csv(rows);
}

int run(int argc, char** argv) {
    CLI::App app{"tractlab: regression-aware CoT judge experiments on a synthetic task"};
    app.require_subcommand(1);

    Options gen_o, pre_o, train_o, tract_o, eval_o, recipe_o, sweep_o;

    auto* gen = app.add_subcommand("gen-data", "write train/test/pairwise datasets");
    gen_o.attach(gen);

    auto* pre = app.add_subcommand("pretrain", "train the seed model on the unlabeled corpus");
    pre_o.attach(pre);

    std::string init, data, save;
    bool from_ps = false;
    auto* tr = app.add_subcommand("train", "fine-tune a checkpoint with one objective");
    train_o.attach(tr);
    tr->add_option("--init", init, "initial checkpoint")->required();
    tr->add_option("--data", data, "training dataset (jsonl)")->required();
    tr->add_option("--save", save, "output checkpoint")->required();

    auto* tc = app.add_subcommand("tract", "two-stage CoT-RAFT pipeline from a seed model");
    tract_o.attach(tc);
    tc->add_option("--init", init, "seed model checkpoint")->required();
    tc->add_option("--data", data, "training dataset with annotation CoTs")->required();
    tc->add_flag("--from-ps", from_ps, "initialize stage 2 from the stage-1 model");

    std::string model, csv;
    auto* ev = app.add_subcommand("eval", "score a dataset and print correlation metrics");
    eval_o.attach(ev);
    ev->add_option("--model", model, "checkpoint")->required();
    ev->add_option("--data", data, "dataset (jsonl)")->required();
    ev->add_option("--csv", csv, "also write the report row here");

    std::string recipe_name;
    auto* rc = app.add_subcommand("recipe", "run a named recipe");
    recipe_o.attach(rc);
    rc->add_option("name", recipe_name, "recipe name")->required();

    std::string param;
    std::string values;
    auto* sw = app.add_subcommand("sweep", "run a recipe once per value of one config field");
    sweep_o.attach(sw);
    sw->add_option("--recipe", recipe_name, "recipe to sweep")->default_val("tract");
    sw->add_option("--param", param, "json pointer of the swept field, e.g. /stage1/lambda")->required();
    sw->add_option("--values", values, "comma-separated values")->required();

    std::vector<std::string> reports;
    std::string summary_out;
    auto* rp = app.add_subcommand("report", "consolidate report CSVs with seed means and stds");
    rp->add_option("reports", reports, "report.csv files")->required();
    rp->add_option("--out", summary_out, "write the consolidated CSV here");

    auto* list = app.add_subcommand("recipes", "list the recipe catalog");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    if (*list) {
        for (const auto& r : recipe_catalog()) {
            std::cout << r.name << "  train=" << (r.objective ? to_string(*r.objective) : "none")
                      << " data=" << to_string(r.data) << " inference=" << to_string(r.inference)
                      << (r.stage2_from_stage1 ? " stage2-from-p_s" : "") << "  -> " << r.output << '\n';
        }
        return 0;
    }

    if (*gen) {
        const auto c = gen_o.resolve();
        const fs::path dir = fs::path(c.output_dir) / "datasets";
        fs::create_directories(dir);
        const auto d = gen_dataset(c.generator, c.data.train, c.data.test);
        save_dataset(dir / "train.jsonl", d.train);
        save_dataset(dir / "test.jsonl", d.test);
        save_pairwise(dir / "pairs.jsonl", gen_pairwise_set(c.generator, c.data.pairs, c.data.pair_min_gap));
        std::cout << "wrote " << dir.string() << " (" << generator_fingerprint(c.generator) << ")\n";
        return 0;
    }

    if (*pre) {
        const auto c = pre_o.resolve();
        const auto corpus = gen_pretrain_corpus(c.generator, c.corpus_size, c.corpus_seed);
        const auto r = pretrain_seed(c.resolved_model(), corpus, c.pretrain, [](int step, double loss) {
            if (step % 500 == 0) progress("step " + std::to_string(step) + " loss " + format_number(loss));
        });
        const fs::path out = fs::path(c.output_dir) / "checkpoints/p0.ckpt";
        fs::create_directories(out.parent_path());
        save_checkpoint(out, r.params, CheckpointInfo{"p0", "init", {}});
        std::cout << "loss " << format_number(r.initial_loss) << " -> " << format_number(r.final_loss)
                  << "\nwrote " << out.string() << '\n';
        return 0;
    }

    if (*tr) {
        const auto c = train_o.resolve();
        const auto p = load_checkpoint(init);
        const auto ds = load_dataset(data);
        const auto r = train(p.params, ds, c.stage1, space_of(c));
        for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
        if (fs::path(save).has_parent_path()) fs::create_directories(fs::path(save).parent_path());
        save_checkpoint(save, r.params, CheckpointInfo{to_string(c.stage1.objective), p.info.role, {}});
        std::cout << "loss " << format_number(r.log.front().total) << " -> "
                  << format_number(r.log.back().total) << "\nwrote " << save << '\n';
        return 0;
    }

    if (*tc) {
        const auto c = tract_o.resolve();
        const auto p = load_checkpoint(init);
        const auto ds = load_dataset(data);
        TractConfig t;
        t.stage1 = c.stage1;
        t.stage2 = c.stage2;
        t.sampling = c.self_data.sampling;
        t.attempts = c.self_data.attempts;
        t.sample_seed = c.self_data.seed;
        t.stage2_from_stage1 = from_ps;
        const auto r = run_tract(p.params, ds, t, space_of(c));
        for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
        const fs::path dir(c.output_dir);
        fs::create_directories(dir);
        save_checkpoint(dir / "p_s.ckpt", r.stage1, CheckpointInfo{"p_s", "p0", {}});
        save_checkpoint(dir / "p_tract.ckpt", r.final_model, CheckpointInfo{"p_tract", r.final_init_from, {}});
        save_dataset(dir / "self.jsonl", r.self_data.dataset);
        std::cout << "self data: " << r.self_data.dataset.examples.size() << " kept, " << r.self_data.dropped
                  << " dropped, " << r.self_data.resampled << " resampled\nwrote " << dir.string() << '\n';
        return 0;
    }

    if (*ev) {
        const auto c = eval_o.resolve();
        const auto p = load_checkpoint(model);
        const auto ds = load_dataset(data);
        const auto e = evaluate_model(p.params, ds, c.predictor, space_of(c), fs::path(data).stem().string());
        ReportRow row{e.report.dataset, e.report.method, e.report.pearson_r, e.report.spearman_rho,
                      e.report.kendall_tau, e.report.rmse, static_cast<int>(e.report.n), c.predictor.k,
                      std::nullopt, std::to_string(c.predictor.seed)};
        print_rows({row});
        if (!csv.empty()) {
            std::ofstream out(csv, std::ios::binary);
            out << report_csv({row});
        }
        return 0;
    }

    if (*rc) {
        const auto c = recipe_o.resolve(recipe_name);
        const auto out = run_recipe(c, progress);
        print_rows(out.rows);
        print_analysis(out.analysis);
        std::cerr << "wrote " << c.output_dir << '\n';
        return 0;
    }

    if (*sw) {
        const auto base = sweep_o.resolve(recipe_name);
        const auto vals = split_list(values);
        if (vals.empty()) throw ConfigError("--values is empty");
        std::vector<fs::path> outs;
        for (const auto& v : vals) {
            json j = base;
            const json::json_pointer ptr(param);
            if (!j.contains(ptr)) throw ConfigError("--param: no config field " + param);
            try {
                j[ptr] = j[ptr].is_string() ? json(v) : json::parse(v);
            } catch (const json::parse_error&) {
                throw ConfigError("--values: cannot parse '" + v + "' for " + param);
            }
            std::string leaf = param.substr(param.find_last_of('/') + 1);
            j["output_dir"] = (fs::path(base.output_dir) / (leaf + "=" + v)).string();
            const auto c = parse_config(j.dump(), "sweep " + param + "=" + v);
            outs.push_back(run_recipe(c, progress).report_path);
        }
        const auto s = emit_summary(outs);
        std::ofstream(fs::path(base.output_dir) / "summary.csv", std::ios::binary) << s.csv;
        std::cout << s.table;
        return 0;
    }

    if (*rp) {
        std::vector<fs::path> paths(reports.begin(), reports.end());
        const auto s = emit_summary(paths);
        if (!summary_out.empty()) std::ofstream(summary_out, std::ios::binary) << s.csv;
        std::cout << s.table;
        return 0;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 1;
    } catch (const InputError& e) {
        std::cerr << "input error: " << e.what() << '\n';
        return 1;
    } catch (const DegenerateError& e) {
        std::cerr << "degenerate model: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "pipeline error: " << e.what() << '\n';
        return 2;
    }
}
