#include "mrgmm/cli.hpp"

#include "mrgmm/bootstrap.hpp"
#include "mrgmm/estimate.hpp"
#include "mrgmm/experiments.hpp"
#include "mrgmm/inference.hpp"
#include "mrgmm/models.hpp"
#include "mrgmm/selftest.hpp"
#include "mrgmm/variance.hpp"

#include <CLI11.hpp>
#include <boost/version.hpp>
#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>

namespace mrgmm::cli {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(text);
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

double parse_double(const std::string& key, const std::string& text) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(text, &used);
    } catch (const std::exception&) {
        throw UsageError(key + ": '" + text + "' is not a number");
    }
    if (used != text.size() || !std::isfinite(v)) throw UsageError(key + ": '" + text + "' is not a finite number");
    return v;
}

std::uint64_t parse_unsigned(const std::string& key, const std::string& text) {
    if (text.empty() || !std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isdigit(c); })) {
        throw UsageError(key + ": '" + text + "' is not a non-negative integer");
    }
    try {
        return std::stoull(text);
    } catch (const std::exception&) {
        throw UsageError(key + ": '" + text + "' is out of range");
    }
}

bool parse_bool(const std::string& key, const std::string& text) {
    std::string t;
    for (char c : text) t.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    if (t == "1" || t == "true" || t == "yes" || t == "on") return true;
    if (t == "0" || t == "false" || t == "no" || t == "off") return false;
    throw UsageError(key + ": '" + text + "' is not a boolean");
}

std::string fmt(double v) {
    if (std::isnan(v)) return "NA";
    if (std::isinf(v)) return v > 0 ? "Inf" : "-Inf";
    if (v == 0.0) v = 0.0;
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return buf;
}

// Shortest text that round-trips.
std::string fmt_exact(double v) {
    if (v == 0.0) v = 0.0;
    char buf[40];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

template <class T>
std::string join(const std::vector<T>& v, std::string (*f)(T)) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += f(v[i]);
    }
    return out;
}

std::string size_text(std::size_t v) { return std::to_string(v); }
std::string string_text(std::string v) { return v; }

const std::vector<std::string> kCommands{"estimate", "ci", "coverage", "power", "selftest"};

}  // namespace

const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys{
        "command", "model",  "data",     "n",          "rho",  "sigma",  "delta",       "gamma1",
        "gamma2",  "shape",  "r",        "B",          "levels", "alpha", "seed",       "threads",
        "out",     "ci_kinds", "theta_grid", "step",   "weight", "j_bootstrap", "oracle_n", "cache"};
    return keys;
}

const std::vector<std::string>& results_columns() {
    static const std::vector<std::string> cols{
        "command", "model",    "shape",    "n",     "rho",       "sigma",     "delta",    "gamma1",
        "gamma2",  "r",        "B",        "seed",  "level",     "kind",      "coordinate", "theta_null",
        "estimate", "se",      "halfwidth", "lo",   "hi",        "covered",   "coverage", "mc_stderr",
        "critical", "failures"};
    return cols;
}

void apply_setting(RunConfig& c, const std::string& key, const std::string& raw) {
    const std::string value = trim(raw);
    if (key == "command") {
        if (std::find(kCommands.begin(), kCommands.end(), value) == kCommands.end()) {
            throw UsageError("command: '" + value + "' is not one of estimate, ci, coverage, power, selftest");
        }
        c.command = value;
    } else if (key == "model") {
        const auto ids = models::model_ids();
        if (std::find(ids.begin(), ids.end(), value) == ids.end()) {
            throw UsageError("model: unknown model '" + value + "'");
        }
        c.model = value;
    } else if (key == "data") {
        c.data = value;
    } else if (key == "n") {
        c.n.clear();
        for (const auto& s : split_list(value)) {
            const auto v = parse_unsigned(key, s);
            if (v < 2) throw UsageError("n: sample sizes must be at least 2");
            c.n.push_back(static_cast<std::size_t>(v));
        }
        if (c.n.empty()) throw UsageError("n: empty list");
    } else if (key == "rho") {
        c.rho = parse_double(key, value);
        if (!(c.rho > -1.0 && c.rho < 1.0)) throw UsageError("rho: must lie in (-1, 1)");
    } else if (key == "sigma") {
        c.sigma = parse_double(key, value);
        if (!(c.sigma > 0.0)) throw UsageError("sigma: must be positive");
    } else if (key == "delta") {
        c.delta.clear();
        for (const auto& s : split_list(value)) c.delta.push_back(parse_double(key, s));
        if (c.delta.empty()) throw UsageError("delta: empty list");
    } else if (key == "gamma1") {
        c.gamma1 = parse_double(key, value);
    } else if (key == "gamma2") {
        if (value == "auto" || value.empty()) {
            c.gamma2.reset();
        } else {
            c.gamma2 = parse_double(key, value);
        }
    } else if (key == "shape") {
        try {
            experiments::parse_shape(value);
        } catch (const Error& e) {
            throw UsageError(std::string("shape: ") + e.what());
        }
        c.shape = value;
    } else if (key == "r") {
        c.r = static_cast<std::size_t>(parse_unsigned(key, value));
        if (c.r < 1) throw UsageError("r: need at least one replication");
    } else if (key == "B") {
        c.B = static_cast<std::size_t>(parse_unsigned(key, value));
        if (c.B < 1) throw UsageError("B: need at least one bootstrap draw");
    } else if (key == "levels") {
        c.levels.clear();
        for (const auto& s : split_list(value)) {
            const double v = parse_double(key, s);
            if (!(v > 0.0 && v < 1.0)) throw UsageError("levels: each level must lie in (0, 1)");
            c.levels.push_back(v);
        }
        if (c.levels.empty()) throw UsageError("levels: empty list");
    } else if (key == "alpha") {
        c.alpha = parse_double(key, value);
        if (!(c.alpha > 0.0 && c.alpha < 1.0)) throw UsageError("alpha: must lie in (0, 1)");
    } else if (key == "seed") {
        c.seed = parse_unsigned(key, value);
    } else if (key == "threads") {
        const auto v = parse_unsigned(key, value);
        if (v > 4096) throw UsageError("threads: at most 4096");
        c.threads = static_cast<int>(v);
    } else if (key == "out") {
        if (value.empty()) throw UsageError("out: empty path");
        c.out = value;
    } else if (key == "ci_kinds") {
        c.ci_kinds.clear();
        for (const auto& s : split_list(value)) {
            try {
                parse_ci_kind(s);
            } catch (const Error& e) {
                throw UsageError(std::string("ci_kinds: ") + e.what());
            }
            c.ci_kinds.push_back(s);
        }
        if (c.ci_kinds.empty()) throw UsageError("ci_kinds: empty list");
    } else if (key == "theta_grid") {
        c.theta_grid.clear();
        for (const auto& s : split_list(value)) c.theta_grid.push_back(parse_double(key, s));
    } else if (key == "step") {
        const auto v = parse_unsigned(key, value);
        if (v != 1 && v != 2) throw UsageError("step: must be 1 or 2");
        c.step = static_cast<int>(v);
    } else if (key == "weight") {
        if (value != "identity" && value != "2sls") throw UsageError("weight: must be identity or 2sls");
        c.weight = value;
    } else if (key == "j_bootstrap") {
        c.j_bootstrap = parse_bool(key, value);
    } else if (key == "oracle_n") {
        c.oracle_n = static_cast<std::size_t>(parse_unsigned(key, value));
        if (c.oracle_n < 1000) throw UsageError("oracle_n: must be at least 1000");
    } else if (key == "cache") {
        c.cache = value;
    } else {
        throw UsageError("unknown configuration key '" + key + "'");
    }
}

std::map<std::string, std::string> read_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file " + path.string());
    std::map<std::string, std::string> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw UsageError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        const auto& keys = config_keys();
        if (std::find(keys.begin(), keys.end(), key) == keys.end()) {
            throw UsageError(path.string() + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
        }
        out[key] = trim(line.substr(eq + 1));
    }
    return out;
}

void validate(const RunConfig& c) {
    if (c.command.empty()) throw UsageError("no command given (estimate, ci, coverage, power, selftest)");
    if (c.command == "estimate" || c.command == "ci") {
        if (c.data.empty()) throw UsageError(c.command + " needs data = <csv path>");
        if (c.weight == "2sls" && c.model != "example2" && c.model != "linear-iv" && c.model != "exp-iv") {
            throw UsageError("weight 2sls needs an instrumental-variables model");
        }
    }
    if (c.command == "coverage" || c.command == "power") {
        if (c.model != "example1" && c.model != "example2") {
            throw UsageError(c.command + " simulates example1 or example2 only");
        }
    }
    if (c.command == "power" && c.theta_grid.size() == 1) {
        throw UsageError("theta_grid: need at least two points");
    }
}

std::map<std::string, std::string> describe(const RunConfig& c) {
    std::map<std::string, std::string> d;
    d["command"] = c.command;
    d["model"] = c.model;
    d["data"] = c.data;
    d["n"] = join(c.n, &size_text);
    d["rho"] = fmt_exact(c.rho);
    d["sigma"] = fmt_exact(c.sigma);
    d["delta"] = join(c.delta, &fmt_exact);
    d["gamma1"] = fmt_exact(c.gamma1);
    d["gamma2"] = c.gamma2 ? fmt_exact(*c.gamma2) : "auto";
    d["shape"] = c.shape;
    d["r"] = std::to_string(c.r);
    d["B"] = std::to_string(c.B);
    d["levels"] = join(c.levels, &fmt_exact);
    d["alpha"] = fmt_exact(c.alpha);
    d["seed"] = std::to_string(c.seed);
    d["threads"] = std::to_string(c.threads);
    d["out"] = c.out;
    d["ci_kinds"] = join(c.ci_kinds, &string_text);
    d["theta_grid"] = join(c.theta_grid, &fmt_exact);
    d["step"] = std::to_string(c.step);
    d["weight"] = c.weight;
    d["j_bootstrap"] = c.j_bootstrap ? "true" : "false";
    d["oracle_n"] = std::to_string(c.oracle_n);
    d["cache"] = c.cache;
    return d;
}

namespace {

constexpr double NA = std::numeric_limits<double>::quiet_NaN();

struct Row {
    std::map<std::string, std::string> cells;

    Row& set(const std::string& key, const std::string& v) {
        cells[key] = v;
        return *this;
    }
    Row& set(const std::string& key, double v) { return set(key, fmt(v)); }
    Row& set_count(const std::string& key, std::size_t v) { return set(key, std::to_string(v)); }
};

struct Output {
    std::vector<Row> rows;
    std::string table;
    std::string figure;  // empty: no figure
    nlohmann::json checks = nlohmann::json::array();
};

Row base_row(const RunConfig& c) {
    Row r;
    r.set("command", c.command).set("model", c.model);
    return r;
}

Row design_row(const RunConfig& c, const experiments::DesignSpec& spec) {
    Row r = base_row(c);
    r.set_count("n", experiments::sample_size(spec));
    if (const auto* e1 = std::get_if<experiments::Example1Spec>(&spec)) {
        r.set("shape", experiments::to_string(e1->shape)).set("rho", e1->rho).set("sigma", e1->sigma);
        r.set("delta", e1->delta);
    } else {
        const auto& e2 = std::get<experiments::Example2Spec>(spec);
        r.set("delta", e2.delta).set("gamma1", e2.gamma1).set("gamma2", e2.gamma2_value());
    }
    r.set_count("r", c.r).set_count("B", c.B).set("seed", std::to_string(c.seed));
    return r;
}

experiments::DesignSpec make_spec(const RunConfig& c, std::size_t n, double delta) {
    if (c.model == "example1") {
        experiments::Example1Spec s;
        s.n = n;
        s.rho = c.rho;
        s.sigma = c.sigma;
        s.delta = delta;
        s.shape = experiments::parse_shape(c.shape);
        s.validate();
        return s;
    }
    experiments::Example2Spec s;
    s.n = n;
    s.delta = delta;
    s.gamma1 = c.gamma1;
    s.gamma2 = c.gamma2;
    s.validate();
    return s;
}

experiments::StudyOptions study_options(const RunConfig& c) {
    experiments::StudyOptions o;
    o.r = c.r;
    o.B = c.B;
    o.levels = c.levels;
    o.seed = c.seed;
    o.ci_kinds.clear();
    for (const auto& k : c.ci_kinds) o.ci_kinds.push_back(parse_ci_kind(k));
    o.j_bootstrap = c.j_bootstrap;
    o.j_level = 0.05;
    o.threads = c.threads;
    o.oracle_n = c.oracle_n;
    o.verification_cache = c.cache.empty() ? std::filesystem::path(c.out) / "pseudo_true_cache.json"
                                           : std::filesystem::path(c.cache);
    return o;
}

nlohmann::json check_json(const experiments::DesignSpec& spec, const experiments::PseudoTrueCheck& ch) {
    return {{"design", experiments::design_name(spec)},
            {"closed_form", ch.closed_form},
            {"estimate", ch.estimate},
            {"standard_error", ch.standard_error},
            {"n", ch.n},
            {"passed", ch.passed}};
}

// ---- SVG ----

struct Series {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
};

struct Panel {
    std::string title;
    std::string xlabel;
    std::string ylabel;
    std::vector<Series> series;
    std::optional<double> reference;  // horizontal dashed line
};

std::string svg_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '&': out += "&amp;"; break;
            default: out.push_back(c);
        }
    }
    return out;
}

std::string render_svg(const std::vector<Panel>& panels) {
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
    constexpr double W = 420, H = 300, L = 60, R = 110, T = 30, Bm = 45;
    std::ostringstream s;
    char buf[256];
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W * static_cast<double>(panels.size())
      << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    for (std::size_t p = 0; p < panels.size(); ++p) {
        const Panel& panel = panels[p];
        double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = 0.0, y1 = 1.0;
        for (const auto& sr : panel.series) {
            for (double v : sr.x) x0 = std::min(x0, v), x1 = std::max(x1, v);
            for (double v : sr.y) {
                if (std::isfinite(v)) y0 = std::min(y0, v), y1 = std::max(y1, v);
            }
        }
        if (!(x1 > x0)) x0 -= 0.5, x1 += 0.5;
        const double pw = W - L - R, ph = H - T - Bm;
        auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * pw; };
        auto py = [&](double y) { return T + (1.0 - (y - y0) / (y1 - y0)) * ph; };
        s << "<g transform=\"translate(" << W * static_cast<double>(p) << ",0)\">\n";
        s << "<text x=\"" << W / 2 << "\" y=\"18\" text-anchor=\"middle\">" << svg_escape(panel.title)
          << "</text>\n";
        std::snprintf(buf, sizeof buf,
                      "<rect x=\"%.1f\" y=\"%.1f\" width=\"%.1f\" height=\"%.1f\" fill=\"none\" stroke=\"black\"/>\n",
                      L, T, pw, ph);
        s << buf;
        for (int t = 0; t <= 4; ++t) {
            const double xv = x0 + (x1 - x0) * t / 4.0, yv = y0 + (y1 - y0) * t / 4.0;
            std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\">%.3g</text>\n",
                          px(xv), T + ph + 14, xv);
            s << buf;
            std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"end\">%.3g</text>\n", L - 4,
                          py(yv) + 4, yv);
            s << buf;
        }
        s << "<text x=\"" << L + pw / 2 << "\" y=\"" << H - 8 << "\" text-anchor=\"middle\">"
          << svg_escape(panel.xlabel) << "</text>\n";
        s << "<text x=\"14\" y=\"" << T + ph / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
          << T + ph / 2 << ")\">" << svg_escape(panel.ylabel) << "</text>\n";
        if (panel.reference) {
            std::snprintf(buf, sizeof buf,
                          "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"gray\" "
                          "stroke-dasharray=\"4 3\"/>\n",
                          L, py(*panel.reference), L + pw, py(*panel.reference));
            s << buf;
        }
        for (std::size_t k = 0; k < panel.series.size(); ++k) {
            const auto& sr = panel.series[k];
            const char* color = colors[k % 6];
            s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
            for (std::size_t i = 0; i < sr.x.size(); ++i) {
                if (!std::isfinite(sr.y[i])) continue;
                std::snprintf(buf, sizeof buf, "%.2f,%.2f ", px(sr.x[i]), py(sr.y[i]));
                s << buf;
            }
            s << "\"/>\n";
            std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" fill=\"%s\">%s</text>\n", L + pw + 8,
                          T + 14.0 * static_cast<double>(k + 1), color, svg_escape(sr.name).c_str());
            s << buf;
        }
        s << "</g>\n";
    }
    s << "</svg>\n";
    return s.str();
}

// ---- commands ----

std::unique_ptr<MomentModel> user_model(const RunConfig& c, const Dataset& data) {
    try {
        return models::make_model(c.model, data.dim());
    } catch (const ArgumentError& e) {
        throw UsageError(e.what());
    }
}

WeightRecipe user_recipe(const RunConfig& c, const Dataset& data) {
    if (c.weight == "identity") return WeightRecipe::identity();
    // IV layouts built by make_model have a single regressor.
    return WeightRecipe::per_obs_outer(column_features(2, data.dim() - 2), "2sls");
}

GmmFit user_fit(const RunConfig& c, const MomentModel& model, const Dataset& data) {
    const WeightRecipe recipe = user_recipe(c, data);
    return c.step == 1 ? one_step(model, data, recipe) : two_step(model, data, {}, recipe);
}

Row data_row(const RunConfig& c, const Dataset& data) {
    Row r = base_row(c);
    r.set_count("n", data.size()).set("seed", std::to_string(c.seed));
    return r;
}

void run_estimate(const RunConfig& c, Output& o, std::ostream& out) {
    const Dataset data = load_csv(c.data);
    const auto model = user_model(c, data);
    const GmmFit fit = user_fit(c, *model, data);
    const VarianceEstimate vc = sigma_conventional(*model, data, fit);
    const VarianceEstimate vm = sigma_mr(*model, data, fit);
    std::ostringstream t;
    t << model->name() << " step " << c.step << " weight " << c.weight << " n = " << data.size() << "\n";
    t << "coord      estimate          SE_C         SE_MR\n";
    char buf[160];
    for (std::size_t k = 0; k < model->param_dim(); ++k) {
        const double th = fit.theta[static_cast<Eigen::Index>(k)];
        for (const auto* v : {&vc, &vm}) {
            Row r = data_row(c, data);
            r.set("kind", v->kind == VarianceKind::robust ? "SE_MR" : "SE_C").set_count("coordinate", k);
            r.set("estimate", th).set("se", v->standard_error(k));
            o.rows.push_back(r);
        }
        std::snprintf(buf, sizeof buf, "%5zu %13.6g %13.6g %13.6g\n", k, th, vc.standard_error(k),
                      vm.standard_error(k));
        t << buf;
    }
    if (fit.step == 2 && model->moment_dim() > model->param_dim()) {
        const JTestResult j = j_test(*model, data, fit, 0.05);
        Row r = data_row(c, data);
        r.set("kind", "J").set("level", 0.95).set("estimate", j.statistic).set("critical", j.critical);
        r.set("coverage", j.reject ? 1.0 : 0.0);
        o.rows.push_back(r);
        std::snprintf(buf, sizeof buf, "J = %.6g (df %zu, 5%% critical %.6g) %s\n", j.statistic, j.df, j.critical,
                      j.reject ? "reject" : "do not reject");
        t << buf;
    }
    o.table = t.str();
    out << o.table;
}

void run_ci(const RunConfig& c, Output& o, std::ostream& out) {
    const Dataset data = load_csv(c.data);
    const auto model = user_model(c, data);
    const GmmFit fit = user_fit(c, *model, data);
    const VarianceEstimate vc = sigma_conventional(*model, data, fit);
    const VarianceEstimate vm = sigma_mr(*model, data, fit);
    ResamplePlan plan;
    plan.B = c.B;
    plan.seed = c.seed;
    plan.stream_id = 0;
    plan.threads = c.threads;
    std::vector<CiKind> kinds;
    for (const auto& s : c.ci_kinds) kinds.push_back(parse_ci_kind(s));
    const bool need_bn = std::find(kinds.begin(), kinds.end(), CiKind::BN) != kinds.end();
    const ElWeights el = need_bn ? el_probabilities(*model, data, fit.theta) : ElWeights{};

    std::ostringstream t;
    char buf[200];
    t << model->name() << " step " << c.step << " n = " << data.size() << " B = " << c.B << "\n";
    t << "coord  level  kind          estimate            lo            hi  failures\n";
    for (std::size_t k = 0; k < model->param_dim(); ++k) {
        std::map<CiKind, TStatDistribution> dists;
        for (CiKind kind : kinds) {
            if (kind == CiKind::MRstar) dists[kind] = mr_bootstrap_t(*model, data, fit, plan, k);
            if (kind == CiKind::HH) dists[kind] = hh_bootstrap_t(*model, data, fit, plan, k);
            if (kind == CiKind::BN) dists[kind] = bn_bootstrap_t(*model, data, fit, el, plan, k);
        }
        for (double level : c.levels) {
            for (CiKind kind : kinds) {
                const double alpha = 1.0 - level;
                ConfidenceInterval ci;
                std::size_t failures = 0;
                if (kind == CiKind::C) {
                    ci = ci_asymptotic(fit, vc, k, alpha);
                } else if (kind == CiKind::MR) {
                    ci = ci_asymptotic(fit, vm, k, alpha);
                } else {
                    const auto& d = dists.at(kind);
                    failures = d.failures;
                    ci = ci_bootstrap(fit, kind == CiKind::MRstar ? vm : vc, d, k, alpha);
                }
                Row r = data_row(c, data);
                r.set_count("B", c.B).set("level", level).set("kind", to_string(kind)).set_count("coordinate", k);
                r.set("estimate", ci.center).set("se", ci.degenerate ? NA : ci.halfwidth / ci.critical);
                r.set("halfwidth", ci.degenerate ? NA : ci.halfwidth);
                r.set("lo", ci.degenerate ? NA : ci.lo).set("hi", ci.degenerate ? NA : ci.hi);
                r.set("critical", ci.degenerate ? NA : ci.critical).set_count("failures", failures);
                o.rows.push_back(r);
                std::snprintf(buf, sizeof buf, "%5zu  %5.3f  %-7s %13.6g %13s %13s %9zu\n", k, level,
                              to_string(kind).c_str(), ci.center, fmt(ci.degenerate ? NA : ci.lo).c_str(),
                              fmt(ci.degenerate ? NA : ci.hi).c_str(), failures);
                t << buf;
            }
        }
    }
    o.table = t.str();
    out << o.table;
}

std::string cell_text(const experiments::CoverageCell& cell) {
    char buf[64];
    if (cell.valid == 0) return "       NA";
    std::snprintf(buf, sizeof buf, "%8.1f%%", 100.0 * cell.coverage);
    return buf;
}

void run_coverage(const RunConfig& c, Output& o, std::ostream& out) {
    const auto opts = study_options(c);
    std::ostringstream t;
    char buf[200];
    // kind -> per-n series of coverage vs delta at the first level
    std::vector<Panel> panels;
    for (std::size_t n : c.n) {
        Panel panel;
        char title[96];
        std::snprintf(title, sizeof title, "%s n = %zu, %.0f%% level", c.model.c_str(), n, 100.0 * c.levels.front());
        panel.title = title;
        panel.xlabel = "delta";
        panel.ylabel = "coverage";
        panel.reference = c.levels.front();
        for (CiKind kind : opts.ci_kinds) panel.series.push_back({to_string(kind), {}, {}});
        panel.series.push_back({"J rejection", {}, {}});
        for (double delta : c.delta) {
            const auto spec = make_spec(c, n, delta);
            const auto table = experiments::coverage_study(spec, opts);
            o.checks.push_back(check_json(spec, table.check));
            t << experiments::design_name(spec) << "  pseudo-true " << fmt(table.pseudo_true) << "  r = " << c.r
              << "  B = " << c.B << "  seed = " << c.seed << "\n";
            t << "kind    ";
            for (double level : c.levels) {
                std::snprintf(buf, sizeof buf, "  %7.0f%%", 100.0 * level);
                t << buf;
            }
            t << "  failures\n";
            for (std::size_t ki = 0; ki < opts.ci_kinds.size(); ++ki) {
                const CiKind kind = opts.ci_kinds[ki];
                std::snprintf(buf, sizeof buf, "%-8s", to_string(kind).c_str());
                t << buf;
                std::size_t failures = 0;
                for (double level : c.levels) {
                    const auto& cell = table.cell(level, kind);
                    failures = std::max(failures, cell.failures);
                    t << "  " << cell_text(cell);
                    Row r = design_row(c, spec);
                    r.set("level", level).set("kind", to_string(kind)).set_count("coordinate", 0);
                    r.set("theta_null", table.pseudo_true).set("estimate", cell.mean_estimate);
                    r.set("halfwidth", cell.valid ? cell.mean_halfwidth : NA);
                    r.set("covered", std::to_string(cell.covered));
                    r.set("coverage", cell.valid ? cell.coverage : NA).set("mc_stderr", cell.valid ? cell.mc_stderr : NA);
                    r.set_count("failures", cell.failures);
                    o.rows.push_back(r);
                }
                std::snprintf(buf, sizeof buf, "  %8zu\n", failures);
                t << buf;
                const auto& first = table.cell(c.levels.front(), kind);
                panel.series[ki].x.push_back(delta);
                panel.series[ki].y.push_back(first.valid ? first.coverage : NA);
            }
            for (const auto& j : table.j) {
                const std::string name = j.kind == JTestKind::asymptotic ? "J" : "J*_HH";
                std::snprintf(buf, sizeof buf, "%-8s  %7.1f%% rejection at %.0f%%  (failures %zu)\n", name.c_str(),
                              100.0 * j.rate, 100.0 * j.level, j.failures);
                t << buf;
                Row r = design_row(c, spec);
                r.set("level", 1.0 - j.level).set("kind", name).set("covered", std::to_string(j.rejections));
                r.set("coverage", j.valid ? j.rate : NA).set("mc_stderr", j.valid ? j.mc_stderr : NA);
                r.set_count("failures", j.failures);
                o.rows.push_back(r);
                if (j.kind == JTestKind::asymptotic) {
                    panel.series.back().x.push_back(delta);
                    panel.series.back().y.push_back(j.valid ? j.rate : NA);
                }
            }
            t << "\n";
        }
        panels.push_back(std::move(panel));
    }
    if (c.delta.size() > 1) o.figure = render_svg(panels);
    o.table = t.str();
    out << o.table;
}

void run_power(const RunConfig& c, Output& o, std::ostream& out) {
    const auto opts = study_options(c);
    std::ostringstream t;
    char buf[200];
    std::vector<Panel> panels;
    for (std::size_t n : c.n) {
        for (double delta : c.delta) {
            const auto spec = make_spec(c, n, delta);
            const auto curve = experiments::power_study(spec, opts, c.alpha, c.theta_grid);
            o.checks.push_back(check_json(spec, curve.check));
            Panel panel;
            panel.title = experiments::design_name(spec);
            panel.xlabel = "theta under the null";
            panel.ylabel = "size-corrected rejection rate";
            panel.reference = c.alpha;
            t << experiments::design_name(spec) << "  pseudo-true " << fmt(curve.pseudo_true) << "  alpha "
              << fmt(c.alpha) << "  r = " << c.r << "  B = " << c.B << "  seed = " << c.seed << "\n";
            t << "      theta";
            for (const auto& s : curve.series) {
                std::snprintf(buf, sizeof buf, " %8s", experiments::test_name(s.kind).c_str());
                t << buf;
            }
            t << "\n";
            for (std::size_t g = 0; g < curve.grid.size(); ++g) {
                std::snprintf(buf, sizeof buf, "%11.5g", curve.grid[g]);
                t << buf;
                for (const auto& s : curve.series) {
                    std::snprintf(buf, sizeof buf, " %8.3f", s.rejection[g]);
                    t << buf;
                }
                t << "\n";
            }
            t << "critical   ";
            for (const auto& s : curve.series) {
                std::snprintf(buf, sizeof buf, " %8.3f", s.critical);
                t << buf;
            }
            t << "\n\n";
            for (const auto& s : curve.series) {
                panel.series.push_back({experiments::test_name(s.kind), curve.grid, s.rejection});
                for (std::size_t g = 0; g < curve.grid.size(); ++g) {
                    Row r = design_row(c, spec);
                    r.set("level", 1.0 - c.alpha).set("kind", experiments::test_name(s.kind));
                    r.set_count("coordinate", 0).set("theta_null", curve.grid[g]);
                    r.set("coverage", s.valid ? s.rejection[g] : NA);
                    r.set("mc_stderr", s.valid ? std::sqrt(s.rejection[g] * (1.0 - s.rejection[g]) /
                                                           static_cast<double>(s.valid))
                                               : NA);
                    r.set("critical", s.critical).set_count("failures", s.failures);
                    o.rows.push_back(r);
                }
            }
            panels.push_back(std::move(panel));
        }
    }
    o.figure = render_svg(panels);
    o.table = t.str();
    out << o.table;
}

void run_selftest_command(const RunConfig& c, Output& o, std::ostream& out) {
    const auto checks = run_selftest(c.seed);
    std::ostringstream t;
    std::size_t failed = 0;
    char buf[200];
    for (const auto& ch : checks) {
        std::snprintf(buf, sizeof buf, "%s  %-42s value %-12s tolerance %s\n", ch.passed ? "PASS" : "FAIL",
                      ch.name.c_str(), fmt(ch.value).c_str(), fmt(ch.tolerance).c_str());
        t << buf;
        failed += ch.passed ? 0 : 1;
        Row r = base_row(c);
        r.set("seed", std::to_string(c.seed)).set("kind", ch.name).set("estimate", ch.value);
        r.set("critical", ch.tolerance).set("covered", ch.passed ? "1" : "0");
        o.rows.push_back(r);
    }
    t << checks.size() - failed << " of " << checks.size() << " checks passed\n";
    o.table = t.str();
    out << o.table;
    if (failed > 0) throw Error(std::to_string(failed) + " self-test check(s) failed");
}

void write_results(const std::filesystem::path& path, const std::vector<Row>& rows) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path.string());
    const auto& cols = results_columns();
    for (std::size_t i = 0; i < cols.size(); ++i) f << (i ? "," : "") << cols[i];
    f << "\n";
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < cols.size(); ++i) {
            const auto it = row.cells.find(cols[i]);
            f << (i ? "," : "") << (it == row.cells.end() ? "NA" : it->second);
        }
        f << "\n";
    }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path.string());
    f << text;
}

std::string openmp_version() {
#ifdef _OPENMP
    return std::to_string(_OPENMP);
#else
    return "none";
#endif
}

nlohmann::json versions() {
    return {{"mrgmm", "1.0.0"},
            {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                          std::to_string(EIGEN_MINOR_VERSION)},
            {"boost", BOOST_LIB_VERSION},
            {"compiler", __VERSION__},
            {"openmp", openmp_version()},
            {"cli11", CLI11_VERSION},
            {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                  std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                  std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
}

}  // namespace

int run(const RunConfig& config, std::ostream& out, std::ostream& err) {
    try {
        validate(config);
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return 2;
    }
    const auto start = std::chrono::steady_clock::now();
    Output o;
    int status = 0;
    std::string failure;
    try {
        std::filesystem::create_directories(config.out);
        if (config.command == "estimate") run_estimate(config, o, out);
        if (config.command == "ci") run_ci(config, o, out);
        if (config.command == "coverage") run_coverage(config, o, out);
        if (config.command == "power") run_power(config, o, out);
        if (config.command == "selftest") run_selftest_command(config, o, out);
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        failure = e.what();
        err << config.command << " failed: " << e.what() << "\n";
        status = 1;
    }
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    try {
        const std::filesystem::path dir(config.out);
        if (!o.rows.empty()) write_results(dir / "results.csv", o.rows);
        if (!o.table.empty()) write_text(dir / "table.txt", o.table);
        if (!o.figure.empty()) write_text(dir / "figure.svg", o.figure);
        nlohmann::json m;
        m["config"] = describe(config);
        m["seed"] = config.seed;
        m["versions"] = versions();
        m["wall_time_seconds"] = wall;
        m["pseudo_true_checks"] = o.checks;
        m["results_columns"] = results_columns();
        m["status"] = status;
        if (!failure.empty()) m["error"] = failure;
        std::ofstream f(dir / "manifest.json", std::ios::binary);
        f << m.dump(2) << "\n";
    } catch (const std::exception& e) {
        err << "cannot write outputs: " << e.what() << "\n";
        return 1;
    }
    return status;
}

namespace {

std::string key_help(const std::string& key) {
    static const std::map<std::string, std::string> help{
        {"command", "estimate | ci | coverage | power | selftest"},
        {"model", "example1 | example2 | mean | linear-iv | exp-iv"},
        {"data", "CSV with a header row (estimate, ci)"},
        {"n", "sample sizes, comma separated"},
        {"rho", "example1 correlation of (Y, Z0)"},
        {"sigma", "example1 lognormal shape"},
        {"delta", "misspecification values, comma separated"},
        {"gamma1", "example2 first-stage coefficient on z1"},
        {"gamma2", "example2 coefficient on z2, or auto"},
        {"shape", "example1 Z distribution: lognormal | normal"},
        {"r", "Monte Carlo replications"},
        {"B", "bootstrap draws"},
        {"levels", "confidence levels, comma separated"},
        {"alpha", "power study significance level"},
        {"seed", "random seed"},
        {"threads", "worker threads, 0 = all cores"},
        {"out", "output directory"},
        {"ci_kinds", "subset of MR*, MR, C, HH, BN"},
        {"theta_grid", "power study null values (must include the pseudo-true value)"},
        {"step", "1 or 2 (estimate, ci)"},
        {"weight", "first-step weight: identity | 2sls"},
        {"j_bootstrap", "also run the recentered bootstrap J test"},
        {"oracle_n", "sample size of the pseudo-true check"},
        {"cache", "pseudo-true check cache file"}};
    const auto it = help.find(key);
    return it == help.end() ? key : it->second;
}

}  // namespace

int main_entry(int argc, char** argv) {
    CLI::App app{"GMM estimation and inference under misspecification"};
    app.set_version_flag("--version", "mrgmm 1.0.0");
    std::string command;
    std::string config_path;
    app.add_option("cmd", command, "estimate | ci | coverage | power | selftest");
    app.add_option("--config", config_path, "flat key = value file; command-line flags override it");
    std::map<std::string, std::string> flags;
    std::vector<std::pair<std::string, CLI::Option*>> options;
    for (const auto& key : config_keys()) {
        options.emplace_back(key, app.add_option("--" + key, flags[key], key_help(key)));
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    try {
        RunConfig config;
        if (!config_path.empty()) {
            for (const auto& [k, v] : read_config_file(config_path)) apply_setting(config, k, v);
        }
        if (!command.empty()) apply_setting(config, "command", command);
        for (const auto& [key, opt] : options) {
            if (opt->count() > 0) apply_setting(config, key, flags[key]);
        }
        return run(config, std::cout, std::cerr);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace mrgmm::cli
