#include "tract/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "tract/hash.hpp"

namespace tract {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// config

void to_json(json& j, const DataSizes& d) {
    j = json{{"train", d.train}, {"test", d.test}, {"pairs", d.pairs}, {"pair_min_gap", d.pair_min_gap}};
}

void from_json(const json& j, DataSizes& d) {
    d.train = j.value("train", d.train);
    d.test = j.value("test", d.test);
    d.pairs = j.value("pairs", d.pairs);
    d.pair_min_gap = j.value("pair_min_gap", d.pair_min_gap);
}

void to_json(json& j, const SelfDataConfig& c) {
    j = json{{"sampling", c.sampling}, {"attempts", c.attempts}, {"seed", c.seed}};
}

void from_json(const json& j, SelfDataConfig& c) {
    if (j.contains("sampling")) c.sampling = j.at("sampling").get<SamplingConfig>();
    c.attempts = j.value("attempts", c.attempts);
    c.seed = j.value("seed", c.seed);
}

namespace {

void check_keys(const json& given, const json& reference, const std::string& path) {
    if (!given.is_object() || !reference.is_object()) return;
    for (const auto& [key, value] : given.items()) {
        const std::string here = path + "/" + key;
        if (!reference.contains(key)) throw ConfigError("unknown config key '" + here + "'");
        check_keys(value, reference.at(key), here);
    }
}

std::size_t line_of(const std::string& text, std::size_t byte) {
    byte = std::min(byte, text.size());
    return 1 + static_cast<std::size_t>(
                   std::count(text.begin(), text.begin() + static_cast<long>(byte), '\n'));
}

}  // namespace

void ExperimentConfig::validate() const {
    find_recipe(recipe);
    generator.validate();
    resolved_model().validate();
    stage1.validate();
    stage2.validate();
    self_data.sampling.validate();
    predictor.sampling.validate();
    if (data.train < 1 || data.test < 2 || data.pairs < 1 || data.pair_min_gap < 1) {
        throw ConfigError("data: sizes must be positive (test >= 2)");
    }
    if (corpus_size < 1) throw ConfigError("corpus_size must be positive");
    if (self_data.attempts < 1) throw ConfigError("self_data.attempts must be >= 1");
    if (predictor.k < 1) throw ConfigError("predictor.k must be >= 1");
    if (seeds.empty()) throw ConfigError("seeds must list at least one seed");
    if (lambda_grid.empty() || k_grid.empty()) throw ConfigError("sweep grids must be nonempty");
    for (double l : lambda_grid) {
        if (!(l >= 0.0)) throw ConfigError("lambda_grid values must be >= 0");
    }
    for (int k : k_grid) {
        if (k < 1) throw ConfigError("k_grid values must be >= 1");
    }
    if (sequential_phase_b_epochs < 0) throw ConfigError("sequential_phase_b_epochs must be >= 0");
    if (degeneracy_samples < 1 || analysis_examples < 1) {
        throw ConfigError("degeneracy_samples and analysis_examples must be positive");
    }
    if (output_dir.empty()) throw ConfigError("output_dir must be set");
}

ModelConfig ExperimentConfig::resolved_model() const {
    ModelConfig m = model;
    if (m.vocab_size == 0) m.vocab_size = Vocabulary(generator).size();
    return m;
}

void to_json(json& j, const ExperimentConfig& c) {
    j = json{{"recipe", c.recipe},
             {"generator", c.generator},
             {"data", c.data},
             {"model", c.model},
             {"pretrain", c.pretrain},
             {"corpus_size", c.corpus_size},
             {"corpus_seed", c.corpus_seed},
             {"seed_checkpoint", c.seed_checkpoint},
             {"stage1", c.stage1},
             {"stage2", c.stage2},
             {"self_data", c.self_data},
             {"predictor", c.predictor},
             {"seeds", c.seeds},
             {"lambda_grid", c.lambda_grid},
             {"k_grid", c.k_grid},
             {"sequential_phase_b_epochs", c.sequential_phase_b_epochs},
             {"degeneracy_samples", c.degeneracy_samples},
             {"analysis_examples", c.analysis_examples},
             {"output_dir", c.output_dir}};
}

void from_json(const json& j, ExperimentConfig& c) {
    if (!j.is_object()) throw ConfigError("config root must be an object");
    check_keys(j, json(ExperimentConfig{}), "");
    c.recipe = j.value("recipe", c.recipe);
    if (j.contains("generator")) c.generator = j.at("generator").get<GeneratorConfig>();
    if (j.contains("data")) c.data = j.at("data").get<DataSizes>();
    if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
    if (j.contains("pretrain")) c.pretrain = j.at("pretrain").get<PretrainConfig>();
    c.corpus_size = j.value("corpus_size", c.corpus_size);
    c.corpus_seed = j.value("corpus_seed", c.corpus_seed);
    c.seed_checkpoint = j.value("seed_checkpoint", c.seed_checkpoint);
    if (j.contains("stage1")) c.stage1 = j.at("stage1").get<TrainConfig>();
    if (j.contains("stage2")) c.stage2 = j.at("stage2").get<TrainConfig>();
    if (j.contains("self_data")) c.self_data = j.at("self_data").get<SelfDataConfig>();
    if (j.contains("predictor")) c.predictor = j.at("predictor").get<PredictorSpec>();
    c.seeds = j.value("seeds", c.seeds);
    c.lambda_grid = j.value("lambda_grid", c.lambda_grid);
    c.k_grid = j.value("k_grid", c.k_grid);
    c.sequential_phase_b_epochs = j.value("sequential_phase_b_epochs", c.sequential_phase_b_epochs);
    c.degeneracy_samples = j.value("degeneracy_samples", c.degeneracy_samples);
    c.analysis_examples = j.value("analysis_examples", c.analysis_examples);
    c.output_dir = j.value("output_dir", c.output_dir);
}

ExperimentConfig parse_config(const std::string& text, const std::string& origin) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(origin + ":" + std::to_string(line_of(text, e.byte)) + ": " + e.what());
    }
    ExperimentConfig c;
    try {
        c = j.get<ExperimentConfig>();
    } catch (const ConfigError& e) {
        throw ConfigError(origin + ": " + e.what());
    } catch (const json::exception& e) {
        throw ConfigError(origin + ": " + e.what());
    }
    c.validate();
    return c;
}

ExperimentConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), path.string());
}

void save_config(const fs::path& path, const ExperimentConfig& config) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write config " + path.string());
    out << json(config).dump(2) << '\n';
}

std::vector<std::string> overlapping_keys(const json& base, const json& overlay) {
    std::vector<std::string> out;
    const auto flat_base = base.flatten();
    const auto flat_overlay = overlay.flatten();
    for (const auto& [key, value] : flat_overlay.items()) {
        if (flat_base.contains(key)) out.push_back(key);
    }
    return out;
}

// ---------------------------------------------------------------------------
// catalog

const char* to_string(CotSource s) {
    switch (s) {
        case CotSource::None: return "none";
        case CotSource::Annotation: return "annotation";
        case CotSource::Self: return "self";
    }
    return "?";
}

const std::vector<RecipeBinding>& recipe_catalog() {
    using O = Objective;
    using M = Method;
    using S = CotSource;
    static const std::vector<RecipeBinding> catalog{
        {"b1_ce_nocot", O::CeScore, S::None, M::ModeNoCot, false, "correlation"},
        {"b2_ce_cot", O::CeCot, S::Annotation, M::ModeCot, false, "correlation"},
        {"b3_zeroshot_rail", std::nullopt, S::None, M::Rail, false, "correlation"},
        {"b4_raft", O::Raft, S::None, M::Rail, false, "correlation"},
        {"a1_cotraft_annotation", O::CotRaft, S::Annotation, M::CotRail, false, "correlation"},
        {"a2_ce_self", O::CeCot, S::Self, M::CotRail, false, "correlation"},
        {"a3_ce_self_decode", O::CeCot, S::Self, M::ModeCot, false, "correlation"},
        {"a4_stage2_from_ps", O::CotRaft, S::Self, M::CotRail, true, "correlation"},
        {"tract", O::CotRaft, S::Self, M::CotRail, false, "correlation"},
        {"sweep_lambda", O::CotRaft, S::Self, M::CotRail, false, "correlation per lambda"},
        {"scale_cots", O::CotRaft, S::Self, M::CotRail, false, "correlation per K"},
        {"sequential", O::CotRaft, S::Annotation, M::CotRail, false, "delimiter-missing fraction"},
        {"pairwise", O::CotRaft, S::Self, M::CotRail, false, "pairwise accuracy"},
        {"shift_analysis", O::CotRaft, S::Self, M::CotRail, false, "rmse gap"},
        {"perplexity", O::CotRaft, S::Annotation, M::CotRail, false, "perplexity under p0"},
    };
    return catalog;
}

const RecipeBinding& find_recipe(const std::string& name) {
    for (const auto& r : recipe_catalog()) {
        if (r.name == name) return r;
    }
    std::string known;
    for (const auto& r : recipe_catalog()) known += (known.empty() ? "" : ", ") + r.name;
    throw ConfigError("unknown recipe '" + name + "' (known: " + known + ")");
}

// ---------------------------------------------------------------------------
// csv

std::string format_number(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

namespace {

std::string opt_number(const std::optional<double>& v) { return v ? format_number(*v) : ""; }

std::string join(const std::vector<std::string>& fields) {
    std::string s;
    for (std::size_t i = 0; i < fields.size(); ++i) s += (i ? "," : "") + fields[i];
    return s;
}

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}

std::vector<std::string> row_fields(const ReportRow& r) {
    return {r.dataset,          r.method,           opt_number(r.r), opt_number(r.rho),
            opt_number(r.tau),  format_number(r.rmse), std::to_string(r.n), std::to_string(r.k),
            opt_number(r.lambda), r.seed};
}

std::optional<double> parse_opt(const std::string& s) {
    if (s.empty()) return std::nullopt;
    return std::stod(s);
}

}  // namespace

std::string report_csv(const std::vector<ReportRow>& rows) {
    std::string out = join(kReportColumns) + "\n";
    for (const auto& r : rows) out += join(row_fields(r)) + "\n";
    return out;
}

std::string analysis_csv(const std::vector<AnalysisRow>& rows) {
    std::string out = "model,quantity,value,seed\n";
    for (const auto& r : rows) out += join({r.model, r.quantity, format_number(r.value), r.seed}) + "\n";
    return out;
}

std::vector<ReportRow> read_report(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open report " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw InputError(path.string() + ": empty report");
    const auto header = split(line);
    std::map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
    for (const auto& name : kReportColumns) {
        if (!col.count(name)) throw InputError(path.string() + ": missing column '" + name + "'");
    }
    std::vector<ReportRow> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto f = split(line);
        if (f.size() != header.size()) {
            throw InputError(path.string() + ":" + std::to_string(lineno) + ": expected " +
                             std::to_string(header.size()) + " fields");
        }
        try {
            ReportRow r;
            r.dataset = f[col["dataset"]];
            r.method = f[col["method"]];
            r.r = parse_opt(f[col["r"]]);
            r.rho = parse_opt(f[col["rho"]]);
            r.tau = parse_opt(f[col["tau"]]);
            r.rmse = std::stod(f[col["rmse"]]);
            r.n = std::stoi(f[col["n"]]);
            r.k = std::stoi(f[col["K"]]);
            r.lambda = parse_opt(f[col["lambda"]]);
            r.seed = f[col["seed"]];
            rows.push_back(r);
        } catch (const std::logic_error&) {
            throw InputError(path.string() + ":" + std::to_string(lineno) + ": bad number");
        }
    }
    return rows;
}

Summary emit_summary(const std::vector<fs::path>& reports) {
    if (reports.empty()) throw InputError("report: no input files");
    std::vector<std::pair<std::string, ReportRow>> all;
    for (const auto& p : reports) {
        const std::string source =
            p.has_parent_path() && p.parent_path().has_filename() ? p.parent_path().filename().string()
                                                                  : p.stem().string();
        for (auto& r : read_report(p)) all.emplace_back(source, std::move(r));
    }

    struct Group {
        std::vector<const ReportRow*> rows;
        std::string source;
    };
    std::vector<std::string> order;
    std::map<std::string, Group> groups;
    for (const auto& [source, r] : all) {
        const std::string key = source + "|" + r.dataset + "|" + r.method + "|" + std::to_string(r.k) +
                                "|" + opt_number(r.lambda);
        if (!groups.count(key)) order.push_back(key);
        groups[key].rows.push_back(&r);
        groups[key].source = source;
    }

    auto stat = [](const std::vector<std::optional<double>>& xs, bool want_std) -> std::optional<double> {
        std::vector<double> v;
        for (const auto& x : xs)
            if (x) v.push_back(*x);
        if (v.empty() || (want_std && v.size() < 2)) return std::nullopt;
        double mean = 0.0;
        for (double x : v) mean += x;
        mean /= static_cast<double>(v.size());
        if (!want_std) return mean;
        double ss = 0.0;
        for (double x : v) ss += (x - mean) * (x - mean);
        return std::sqrt(ss / static_cast<double>(v.size() - 1));
    };

    std::vector<std::string> header{"source"};
    header.insert(header.end(), kReportColumns.begin(), kReportColumns.end());
    std::vector<std::vector<std::string>> table;
    for (const auto& [source, r] : all) {
        auto f = row_fields(r);
        f.insert(f.begin(), source);
        table.push_back(std::move(f));
    }
    for (const auto& key : order) {
        const auto& g = groups[key];
        if (g.rows.size() < 2) continue;
        for (bool want_std : {false, true}) {
            std::vector<std::optional<double>> r, rho, tau, rm;
            for (const auto* row : g.rows) {
                r.push_back(row->r);
                rho.push_back(row->rho);
                tau.push_back(row->tau);
                rm.push_back(row->rmse);
            }
            const ReportRow& first = *g.rows.front();
            table.push_back({g.source, first.dataset, first.method, opt_number(stat(r, want_std)),
                             opt_number(stat(rho, want_std)), opt_number(stat(tau, want_std)),
                             opt_number(stat(rm, want_std)), std::to_string(first.n),
                             std::to_string(first.k), opt_number(first.lambda),
                             want_std ? "std" : "mean"});
        }
    }

    Summary s;
    s.csv = join(header) + "\n";
    for (const auto& row : table) s.csv += join(row) + "\n";

    std::vector<std::size_t> width(header.size());
    for (std::size_t i = 0; i < header.size(); ++i) width[i] = header[i].size();
    for (const auto& row : table)
        for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
    std::ostringstream t;
    auto emit = [&](const std::vector<std::string>& row) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            t << std::left << std::setw(static_cast<int>(width[i]) + 2) << (row[i].empty() ? "-" : row[i]);
        }
        t << '\n';
    };
    emit(header);
    for (const auto& row : table) emit(row);
    s.table = t.str();
    return s;
}

// ---------------------------------------------------------------------------
// runner

namespace {

std::string seed_tag(std::uint64_t s) { return std::to_string(s); }

class Runner {
public:
    Runner(const ExperimentConfig& config, const Progress& progress)
        : cfg_(config),
          progress_(progress),
          dir_(config.output_dir),
          vocab_(config.generator),
          space_(vocab_.score_space()),
          binding_(find_recipe(config.recipe)) {}

    RecipeOutput run() {
        fs::create_directories(dir_ / "checkpoints");
        fs::create_directories(dir_ / "datasets");
        note("generating data");
        data_ = gen_dataset(cfg_.generator, cfg_.data.train, cfg_.data.test);
        save_dataset(dir_ / "datasets/train.jsonl", data_.train);
        save_dataset(dir_ / "datasets/test.jsonl", data_.test);
        files_.push_back("datasets/train.jsonl");
        files_.push_back("datasets/test.jsonl");

        for (std::uint64_t s : cfg_.seeds) run_seed(s);

        RecipeOutput out;
        out.rows = rows_;
        out.analysis = analysis_;
        out.report_path = write("report.csv", report_csv(rows_));
        out.analysis_path = write("analysis.csv", analysis_csv(analysis_));
        write("config.json", json(cfg_).dump(2) + "\n");
        out.manifest_path = write_manifest();
        return out;
    }

private:
    void note(const std::string& msg) const {
        if (progress_) progress_(cfg_.recipe + ": " + msg);
    }

    fs::path write(const std::string& rel, const std::string& content) {
        const fs::path p = dir_ / rel;
        std::ofstream out(p, std::ios::binary);
        if (!out) throw PipelineError("cannot write " + p.string());
        out << content;
        out.close();
        files_.push_back(rel);
        return p;
    }

    fs::path write_manifest() {
        json files = json::object();
        std::sort(files_.begin(), files_.end());
        files_.erase(std::unique(files_.begin(), files_.end()), files_.end());
        for (const auto& rel : files_) files[rel] = sha256_file(dir_ / rel);
        json m{{"recipe", cfg_.recipe},
               {"generator_fingerprint", generator_fingerprint(cfg_.generator)},
               {"config_sha256", sha256_hex(json(cfg_).dump())},
               {"seeds", cfg_.seeds},
               {"files", files}};
        const fs::path p = dir_ / "manifest.json";
        std::ofstream out(p, std::ios::binary);
        out << m.dump(2) << '\n';
        return p;
    }

    void checkpoint(const std::string& name, const ModelParams& p, const std::string& role,
                    const std::string& init_from) {
        const std::string rel = "checkpoints/" + name + ".ckpt";
        save_checkpoint(dir_ / rel, p, CheckpointInfo{role, init_from, {{"recipe", cfg_.recipe}}});
        files_.push_back(rel);
    }

    const ModelParams& p0() {
        if (p0_) return *p0_;
        const ModelConfig mc = cfg_.resolved_model();
        if (!cfg_.seed_checkpoint.empty()) {
            note("loading seed model " + cfg_.seed_checkpoint);
            auto loaded = load_checkpoint(cfg_.seed_checkpoint);
            if (!(loaded.params.config == mc)) {
                throw ConfigError("seed checkpoint " + cfg_.seed_checkpoint +
                                  " does not match the model config");
            }
            p0_ = std::move(loaded.params);
        } else {
            note("pretraining seed model");
            const auto corpus = gen_pretrain_corpus(cfg_.generator, cfg_.corpus_size, cfg_.corpus_seed);
            auto r = pretrain_seed(mc, corpus, cfg_.pretrain);
            analysis_.push_back({"p0", "pretrain_initial_loss", r.initial_loss, ""});
            analysis_.push_back({"p0", "pretrain_final_loss", r.final_loss, ""});
            p0_ = std::move(r.params);
        }
        checkpoint("p0", *p0_, "p0", cfg_.seed_checkpoint.empty() ? "init" : "file");
        return *p0_;
    }

    TrainConfig seeded(TrainConfig t, std::uint64_t s, std::uint64_t stream) const {
        t.seed = derive_seed(t.seed, stream, s);
        return t;
    }

    PredictorSpec spec_for(std::uint64_t s, Method m, int k) const {
        PredictorSpec p = cfg_.predictor;
        p.method = m;
        p.k = k;
        p.seed = derive_seed(cfg_.predictor.seed, s);
        return p;
    }

    TractConfig tract_config(std::uint64_t s, double lambda, bool from_stage1) const {
        TractConfig t;
        t.stage1 = seeded(cfg_.stage1, s, 1);
        t.stage2 = seeded(cfg_.stage2, s, 2);
        t.stage1.objective = Objective::CotRaft;
        t.stage2.objective = Objective::CotRaft;
        t.stage1.lambda = lambda;
        t.stage2.lambda = lambda;
        t.sampling = cfg_.self_data.sampling;
        t.attempts = cfg_.self_data.attempts;
        t.sample_seed = derive_seed(cfg_.self_data.seed, s);
        t.stage2_from_stage1 = from_stage1;
        return t;
    }

    ReportRow evaluate(const ModelParams& p, std::uint64_t s, Method m, int k,
                       std::optional<double> lambda, const std::string& label) {
        const auto spec = spec_for(s, m, k);
        const auto e = evaluate_model(p, data_.test, spec, space_, "synthetic_test");
        ReportRow row;
        row.dataset = "synthetic_test";
        row.method = label + "/" + to_string(m);
        row.r = e.report.pearson_r;
        row.rho = e.report.spearman_rho;
        row.tau = e.report.kendall_tau;
        row.rmse = e.report.rmse;
        row.n = static_cast<int>(e.report.n);
        row.k = k;
        row.lambda = lambda;
        row.seed = seed_tag(s);
        if (method_uses_cot(m)) {
            const auto d = cot_degeneracy_stats(e.records);
            analysis_.push_back({row.method, "missing_delimiter_fraction", d.missing_delimiter_fraction,
                                 row.seed});
        }
        return row;
    }

    ModelParams stage1(std::uint64_t s, Objective objective) {
        TrainConfig t = seeded(cfg_.stage1, s, 1);
        t.objective = objective;
        note(std::string("training ") + to_string(objective) + " seed " + seed_tag(s));
        auto r = train(p0(), data_.train, t, space_);
        for (const auto& w : r.warnings) note("warning: " + w);
        return std::move(r.params);
    }

    PipelineResult tract_run(std::uint64_t s, double lambda, bool from_stage1, const std::string& tag) {
        note("two-stage run seed " + seed_tag(s) + tag);
        auto r = run_tract(p0(), data_.train, tract_config(s, lambda, from_stage1), space_);
        for (const auto& w : r.warnings) note("warning: " + w);
        const std::string sfx = tag + "_seed" + seed_tag(s);
        checkpoint("p_s" + sfx, r.stage1, "p_s", "p0");
        checkpoint("p_tract" + sfx, r.final_model, "p_tract", r.final_init_from);
        const std::string rel = "datasets/self" + sfx + ".jsonl";
        save_dataset(dir_ / rel, r.self_data.dataset);
        files_.push_back(rel);
        analysis_.push_back({"p_s" + tag, "self_dropped", static_cast<double>(r.self_data.dropped), seed_tag(s)});
        analysis_.push_back({"p_s" + tag, "self_resampled", static_cast<double>(r.self_data.resampled), seed_tag(s)});
        return r;
    }

    Dataset head(const Dataset& d, std::size_t n) const {
        Dataset out = d;
        if (out.examples.size() > n) out.examples.resize(n);
        return out;
    }

    static double style_rate(const Vocabulary& v, const std::vector<CotText>& texts) {
        double style = 0, total = 0;
        for (const auto& t : texts) {
            for (Token tok : t.cot) {
                style += v.is_style(tok) ? 1.0 : 0.0;
                total += 1.0;
            }
        }
        return total > 0 ? style / total : 0.0;
    }

    void run_seed(std::uint64_t s) {
        const std::string& name = binding_.name;
        const std::string tag = seed_tag(s);
        const double lambda = cfg_.stage1.lambda;
        const int k = cfg_.predictor.k;

        if (name == "b3_zeroshot_rail") {
            rows_.push_back(evaluate(p0(), s, Method::Rail, k, std::nullopt, name));
        } else if (name == "b1_ce_nocot" || name == "b2_ce_cot" || name == "b4_raft" ||
                   name == "a1_cotraft_annotation") {
            const auto p = stage1(s, *binding_.objective);
            checkpoint(name + "_seed" + tag, p, name == "a1_cotraft_annotation" ? "p_s" : name, "p0");
            const auto lam = *binding_.objective == Objective::CotRaft ? std::optional<double>(lambda)
                                                                       : std::nullopt;
            rows_.push_back(evaluate(p, s, binding_.inference, k, lam, name));
        } else if (name == "a2_ce_self" || name == "a3_ce_self_decode") {
            const auto ps = stage1(s, Objective::CotRaft);
            checkpoint("p_s_seed" + tag, ps, "p_s", "p0");
            note("sampling self CoTs seed " + tag);
            const auto self = build_self_dataset(ps, data_.train, space_, cfg_.self_data.sampling,
                                                 derive_seed(cfg_.self_data.seed, s), cfg_.self_data.attempts);
            TrainConfig t2 = seeded(cfg_.stage2, s, 2);
            t2.objective = Objective::CeCot;
            note("training stage 2 with ce_cot seed " + tag);
            const auto p = train(p0(), self.dataset, t2, space_).params;
            checkpoint(name + "_seed" + tag, p, name, "p0");
            rows_.push_back(evaluate(p, s, binding_.inference, k, std::nullopt, name));
        } else if (name == "tract" || name == "a4_stage2_from_ps") {
            const auto r = tract_run(s, lambda, binding_.stage2_from_stage1, "");
            rows_.push_back(evaluate(r.final_model, s, Method::CotRail, k, lambda, name));
        } else if (name == "sweep_lambda") {
            for (double l : cfg_.lambda_grid) {
                const auto r = tract_run(s, l, false, "_lambda" + format_number(l));
                rows_.push_back(evaluate(r.final_model, s, Method::CotRail, k, l, name));
            }
        } else if (name == "scale_cots") {
            const auto r = tract_run(s, lambda, false, "");
            for (int kk : cfg_.k_grid) {
                note("evaluating K=" + std::to_string(kk) + " seed " + tag);
                rows_.push_back(evaluate(r.final_model, s, Method::CotRail, kk, lambda, name));
                rows_.push_back(evaluate(r.final_model, s, Method::ModeCot, kk, lambda, name));
            }
        } else if (name == "sequential") {
            SequentialConfig sc;
            sc.phase_a = seeded(cfg_.stage1, s, 1);
            sc.phase_b_epochs = cfg_.sequential_phase_b_epochs;
            sc.sampling = cfg_.predictor.sampling;
            sc.sample_seed = derive_seed(cfg_.predictor.seed, s);
            sc.degeneracy_samples = cfg_.degeneracy_samples;
            note("sequential schedule seed " + tag);
            const auto seq = run_sequential(p0(), data_.train, data_.test, sc, space_);
            checkpoint("sequential_seed" + tag, seq.params, "sequential", "p0");
            TrainConfig joint = seeded(cfg_.stage1, s, 1);
            joint.objective = Objective::CotRaft;
            joint.epochs = sc.phase_a.epochs + sc.phase_b_epochs;
            note("joint schedule seed " + tag);
            const auto jp = train(p0(), data_.train, joint, space_).params;
            checkpoint("joint_seed" + tag, jp, "joint", "p0");
            const auto jd = sample_degeneracy(jp, data_.test, space_, sc.sampling, sc.sample_seed,
                                              sc.degeneracy_samples);
            for (const auto& [model, d] : {std::pair{std::string("sequential"), seq.stats},
                                           std::pair{std::string("joint"), jd}}) {
                analysis_.push_back({model, "missing_delimiter_fraction", d.missing_delimiter_fraction, tag});
                analysis_.push_back({model, "mean_cot_length", d.mean_cot_length, tag});
                analysis_.push_back({model, "samples", static_cast<double>(d.samples), tag});
            }
            rows_.push_back(evaluate(seq.params, s, Method::CotRail, k, std::nullopt, "sequential"));
            rows_.push_back(evaluate(jp, s, Method::CotRail, k, lambda, "joint"));
        } else if (name == "pairwise") {
            const auto r = tract_run(s, lambda, false, "");
            if (pairs_.pairs.empty()) {
                pairs_ = gen_pairwise_set(cfg_.generator, cfg_.data.pairs, cfg_.data.pair_min_gap);
                save_pairwise(dir_ / "datasets/pairs.jsonl", pairs_);
                files_.push_back("datasets/pairs.jsonl");
            }
            const auto acc = pairwise_accuracy(r.final_model, pairs_, spec_for(s, Method::CotRail, k), space_);
            analysis_.push_back({"p_tract", "pairwise_accuracy", acc.accuracy, tag});
            rows_.push_back(evaluate(r.final_model, s, Method::CotRail, k, lambda, name));
        } else if (name == "shift_analysis") {
            const auto r = tract_run(s, lambda, false, "");
            const auto n = static_cast<std::size_t>(cfg_.analysis_examples);
            const auto spec = spec_for(s, Method::CotRail, 1);
            note("shift analysis seed " + tag);
            const auto a = distribution_shift_analysis(r.stage1, head(data_.train, n), spec, space_);
            const auto b = distribution_shift_analysis(r.final_model, head(r.self_data.dataset, n), spec, space_);
            for (const auto& [model, rep] : {std::pair{std::string("p_s"), a}, std::pair{std::string("p_tract"), b}}) {
                analysis_.push_back({model, "rmse_training_cots", rep.rmse_on_training_cots, tag});
                analysis_.push_back({model, "rmse_self_cots", rep.rmse_on_self_cots, tag});
                analysis_.push_back({model, "gap", rep.gap, tag});
            }
            // same seeds and spec as the a1 and tract recipes
            rows_.push_back(evaluate(r.stage1, s, Method::CotRail, k, lambda, "a1_cotraft_annotation"));
            rows_.push_back(evaluate(r.final_model, s, Method::CotRail, k, lambda, "tract"));
        } else if (name == "perplexity") {
            const auto ps = stage1(s, Objective::CotRaft);
            checkpoint("p_s_seed" + tag, ps, "p_s", "p0");
            const Dataset subset = head(data_.train, static_cast<std::size_t>(cfg_.analysis_examples));
            note("sampling CoTs for perplexity seed " + tag);
            const auto self = build_self_dataset(ps, subset, space_, cfg_.self_data.sampling,
                                                 derive_seed(cfg_.self_data.seed, s), cfg_.self_data.attempts);
            std::vector<CotText> annotation, generated;
            for (const auto& ex : subset.examples) annotation.push_back({ex.x, *ex.s});
            for (const auto& ex : self.dataset.examples) generated.push_back({ex.x, *ex.s});
            analysis_.push_back({"annotation", "perplexity_p0", perplexity(p0(), annotation), tag});
            analysis_.push_back({"p_s", "perplexity_p0", perplexity(p0(), generated), tag});
            analysis_.push_back({"annotation", "style_rate", style_rate(vocab_, annotation), tag});
            analysis_.push_back({"p_s", "style_rate", style_rate(vocab_, generated), tag});
        } else {
            throw InternalError("recipe '" + name + "' has no runner");
        }
    }

    const ExperimentConfig& cfg_;
    Progress progress_;
    fs::path dir_;
    Vocabulary vocab_;
    ScoreSpace space_;
    const RecipeBinding& binding_;
    GeneratedData data_;
    PairwiseSet pairs_;
    std::optional<ModelParams> p0_;
    std::vector<ReportRow> rows_;
    std::vector<AnalysisRow> analysis_;
    std::vector<std::string> files_;
};

}  // namespace

RecipeOutput run_recipe(const ExperimentConfig& config, const Progress& progress) {
    config.validate();
    try {
        return Runner(config, progress).run();
    } catch (const ConfigError& e) {
        throw ConfigError("recipe " + config.recipe + ": " + e.what());
    } catch (const DegenerateError& e) {
        throw DegenerateError("recipe " + config.recipe + ": " + e.what());
    } catch (const PipelineError& e) {
        throw PipelineError("recipe " + config.recipe + ": " + e.what());
    }
}

}  // namespace tract
