// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
// Usage: acceptance <work-dir>

#include "ciuap/errors.hpp"
#include "ciuap/evaluation.hpp"
#include "ciuap/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>

using namespace ciuap;
namespace fs = std::filesystem;
using pipeline::RunConfig;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool pass = false;
    std::string detail;
};

// Shared state between criteria; later checks reuse the desk run.
struct Workspace {
    fs::path root;
    RunConfig desk;
    pipeline::RunResult full;
    double full_seconds = 0.0;
    bool have_full = false;
};

fs::path generator_dir(const Workspace& w) { return w.full.run_dir / "generator"; }

void require_full(const Workspace& w)
{
    if (!w.have_full) throw Error("desk full-pipeline run did not complete");
}

std::string fmt(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

// Attack effectiveness and end-to-end runtime on the desk CNN.
Outcome attack_effectiveness(Workspace& w)
{
    const auto t0 = Clock::now();
    w.full = pipeline::run("full-pipeline", w.desk);
    w.full_seconds = seconds_since(t0);
    w.have_full = true;
    const auto& ev = w.full.summary.at("metrics").at("evaluation");
    const double sr = ev.at("success_rate").get<double>();
    const double base = ev.at("noise_baseline").get<double>();
    return {sr >= base + 20.0 && w.full_seconds <= 7200.0,
            "white-box " + fmt(sr) + "% vs noise " + fmt(base) + "% (need +20), " + fmt(w.full_seconds) + " s"};
}

Outcome impression_validity(Workspace& w)
{
    require_full(w);
    const auto ds = load_impression_dataset(w.full.run_dir / "impressions");
    const auto clf = load_classifier(w.desk.registry(), ds.model_id);
    const auto cfg = w.desk.impression_config();
    int valid = 0;
    for (const auto& r : ds.records) {
        const Tensor p = tap_softmax(clf, r.image);
        const bool in_range = r.target_confidence >= cfg.confidence_low && r.target_confidence <= cfg.confidence_high;
        valid += in_range && r.steps_used <= cfg.max_steps && p.vec()[r.class_id] >= r.target_confidence;
    }
    const int expected = 10 * clf.num_classes();
    const double rate = 100.0 * valid / std::max(1, ds.size());
    return {ds.size() == expected && rate >= 90.0,
            std::to_string(valid) + "/" + std::to_string(ds.size()) + " records re-verified from disk"};
}

Outcome norm_certificate(Workspace& w)
{
    require_full(w);
    const auto g = load_generator(generator_dir(w));
    const auto t0 = Clock::now();
    Rng rng(derive_seed(w.desk.root_seed(), "norm-certificate"));
    const auto z = sample_latent(rng, 1000, g.latent_dim());
    long violations = 0;
    float worst = 0.0F;
    for (const auto& l : z) {
        const auto v = generate_uap(g, l);
        for (float x : v.values.vec()) {
            worst = std::max(worst, std::abs(x));
            violations += !(std::abs(x) <= g.xi());
        }
    }
    const double secs = seconds_since(t0);
    return {violations == 0 && secs < 60.0,
            std::to_string(violations) + " violations, max |v| " + fmt(worst) + " <= " + fmt(g.xi()) + ", " +
                fmt(secs) + " s"};
}

Outcome transfer_structure(Workspace& w)
{
    const auto r = pipeline::run("transfer-matrix", w.desk);
    const auto& t = r.summary.at("metrics").at("transfer");
    const auto rates = t.at("rates").get<std::vector<std::vector<double>>>();
    const auto base = t.at("noise_baseline").get<std::vector<double>>();
    bool ok = rates.size() == 3;
    std::ostringstream detail;
    for (std::size_t i = 0; i < rates.size(); ++i) {
        ok = ok && rates[i].size() == 3;
        for (std::size_t j = 0; j < rates[i].size(); ++j) {
            ok = ok && rates[i][j] >= 0.0 && rates[i][j] <= 100.0;
            if (i != j) ok = ok && rates[i][j] > base[j];
            detail << (j == 0 ? (i == 0 ? "" : " | ") : " ") << fmt(rates[i][j]);
        }
    }
    detail << " ; noise";
    for (double b : base) detail << " " << fmt(b);
    return {ok, detail.str()};
}

Outcome diversity(Workspace& w)
{
    require_full(w);
    RunConfig with = w.desk;
    with.set("input.generator", generator_dir(w).string());
    const auto d1 = pipeline::run("diversity", with).summary.at("metrics").at("diversity");

    RunConfig control = w.desk;
    control.set("train.lambda", "0");
    control.set("input.impressions", (w.full.run_dir / "impressions").string());
    const auto g0 = pipeline::run("train-generator", control);
    control.set("input.generator", (g0.run_dir / "generator").string());
    const auto d0 = pipeline::run("diversity", control).summary.at("metrics").at("diversity");

    const int l1 = d1.at("labels_at_coverage").get<int>();
    const int l0 = d0.at("labels_at_coverage").get<int>();
    const double dist = d1.at("min_pairwise_euclidean").get<double>();
    return {l1 >= l0 && dist > 0.0, "labels at 95%: lambda=1 " + std::to_string(l1) + ", lambda=0 " +
                                        std::to_string(l0) + "; min pairwise distance " + fmt(dist)};
}

Outcome interpolation(Workspace& w)
{
    require_full(w);
    RunConfig cfg = w.desk;
    cfg.set("input.generator", generator_dir(w).string());
    cfg.set("interp.steps", "5");
    const auto m = pipeline::run("interpolate", cfg).summary.at("metrics").at("interpolation");
    const double spread = m.at("spread").get<double>();
    const bool exact = m.at("endpoints_exact").get<bool>();
    std::string rates;
    for (double r : m.at("success_rates").get<std::vector<double>>()) rates += " " + fmt(r);
    return {spread <= 10.0 && exact,
            "rates" + rates + ", spread " + fmt(spread) + ", endpoints " + (exact ? "exact" : "differ")};
}

Outcome adversarial_training(Workspace& w)
{
    require_full(w);
    RunConfig cfg = w.desk;
    cfg.set("input.generator", generator_dir(w).string());
    const auto m = pipeline::run("adv-train", cfg).summary.at("metrics").at("adversarial_training");
    const double before = m.at("success_rate_before").get<double>();
    const double after = m.at("success_rate_after").get<double>();
    const double again = m.at("recovered_success_rate").get<double>();
    return {after < before && again > after,
            "before " + fmt(before) + "%, after finetune " + fmt(after) + "%, retrained " + fmt(again) + "%"};
}

// Closed-form toy model in double precision, independent of the library.
struct Toy {
    static double softmax(double x0, double x1, int c)
    {
        x0 = std::clamp(x0, 0.0, 255.0);
        x1 = std::clamp(x1, 0.0, 255.0);
        return 1.0 / (1.0 + std::exp(-(c == 0 ? 2.0 : -2.0) * (x0 - x1)));
    }
    static int label(double x0, double x1) { return x1 > x0 ? 1 : 0; }
    static double logit(double x0, double x1, int c) { return c == 0 ? x0 - x1 : x1 - x0; }

    // Fooling + lambda * cosine diversity, v laid out as pairs per image.
    static double loss(const std::vector<double>& x, const std::vector<double>& v, double lambda)
    {
        double fool = 0.0;
        double div = 0.0;
        const std::size_t n = x.size() / 2;
        for (std::size_t i = 0; i < n; ++i) {
            const int c = label(x[2 * i], x[2 * i + 1]);
            double e[2][2];
            for (int k = 0; k < 2; ++k) {
                const double a = x[2 * i] + v[4 * i + 2 * k];
                const double b = x[2 * i + 1] + v[4 * i + 2 * k + 1];
                fool -= std::log((1.0 - softmax(a, b, c) + 1e-6) / (1.0 + 1e-6));
                for (int j = 0; j < 2; ++j) e[k][j] = softmax(a, b, j);
            }
            const double cos = (e[0][0] * e[1][0] + e[0][1] * e[1][1]) /
                               (std::hypot(e[0][0], e[0][1]) * std::hypot(e[1][0], e[1][1]));
            div -= 1.0 - cos;
        }
        return fool / static_cast<double>(2 * n) + lambda * div;
    }
};

double vector_rel_error(const std::vector<double>& a, const std::vector<double>& b)
{
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        den += std::max(a[i] * a[i], b[i] * b[i]);
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-12);
}

Outcome numerical_correctness(Workspace&)
{
    const auto clf = make_toy_linear_classifier();
    double worst = 0.0;

    // Impression objective: gradient of the class logit at an augmented image.
    const auto icfg = identity_augmentation_config();
    for (int c = 0; c < 2; ++c) {
        const Tensor x(Shape{1, 1, 1, 2}, {40.0F, 70.0F});
        Rng rng(3);
        const auto aug = Augmentation::sample(x.shape(), rng, icfg, clf.pixel_range());
        const auto r = clf.forward(aug.apply(x));
        Tensor onehot(Shape{1, 2, 1, 1});
        onehot.vec()[c] = 1.0F;
        const Tensor g = aug.backward(x, clf.backward(r, onehot));
        std::vector<double> fd(2);
        for (int k = 0; k < 2; ++k) {
            double up[2] = {x.vec()[0], x.vec()[1]};
            double down[2] = {x.vec()[0], x.vec()[1]};
            up[k] += 1e-3;
            down[k] -= 1e-3;
            fd[k] = (Toy::logit(up[0], up[1], c) - Toy::logit(down[0], down[1], c)) / 2e-3;
        }
        worst = std::max(worst, vector_rel_error({g.vec()[0], g.vec()[1]}, fd));
    }

    // Generator loss with respect to the perturbations.
    const std::vector<float> xs{1.0F, 0.4F, 0.3F, 1.1F, 2.0F, 1.5F};
    const std::vector<float> vs{0.2F, -0.1F, -0.3F, 0.25F, 0.1F, 0.05F, -0.2F, -0.4F, 0.3F, -0.2F, -0.1F, 0.35F};
    const Tensor x(Shape{3, 1, 1, 2}, xs);
    const Tensor v(Shape{6, 1, 1, 2}, vs);
    TrainConfig cfg;
    cfg.lambda = 1.0;
    const std::vector<int> twice{0, 0, 1, 1, 2, 2}; // image i meets v[2i] and v[2i+1]
    const auto fool = fooling_loss_with_grad(clf, x.gather(twice), v);
    const auto div = diversity_loss_with_grad(clf, x, v, cfg);
    std::vector<double> analytic(vs.size());
    for (std::size_t i = 0; i < vs.size(); ++i) analytic[i] = fool.grad_v.vec()[i] + div.grad_v.vec()[i];
    const std::vector<double> xd(xs.begin(), xs.end());
    std::vector<double> vd(vs.begin(), vs.end());
    std::vector<double> fd(vs.size());
    for (std::size_t i = 0; i < vd.size(); ++i) {
        const double keep = vd[i];
        vd[i] = keep + 1e-5;
        const double up = Toy::loss(xd, vd, 1.0);
        vd[i] = keep - 1e-5;
        const double down = Toy::loss(xd, vd, 1.0);
        vd[i] = keep;
        fd[i] = (up - down) / 2e-5;
    }
    worst = std::max(worst, vector_rel_error(analytic, fd));
    const double loss_err = std::abs(total_loss(fool.loss, div.loss, 1.0) - Toy::loss(xd, vd, 1.0)) /
                            std::abs(Toy::loss(xd, vd, 1.0));

    // Success rate on the 4-point toy set against exhaustive enumeration.
    Dataset d;
    d.id = "toy-4";
    d.num_classes = 2;
    d.images = Tensor(Shape{4, 1, 1, 2}, {1, 0, 2, 1, 3, 2, 0, 3});
    d.labels.assign(4, 0);
    int mismatches = 0;
    for (int a = -8; a <= 8; ++a) {
        for (int b = -8; b <= 8; ++b) {
            const double va = 0.5 * a;
            const double vb = 0.5 * b;
            int fooled = 0;
            for (int i = 0; i < 4; ++i) {
                const double x0 = d.images.sample(i)[0];
                const double x1 = d.images.sample(i)[1];
                fooled += Toy::label(x0, x1) !=
                          Toy::label(std::clamp(x0 + va, 0.0, 255.0), std::clamp(x1 + vb, 0.0, 255.0));
            }
            const Perturbation p{Tensor(Shape{1, 1, 1, 2}, {static_cast<float>(va), static_cast<float>(vb)}), 10.0F, {}};
            mismatches += success_rate(clf, d, p) != 100.0 * fooled / 4.0;
        }
    }
    char buf[160];
    std::snprintf(buf, sizeof(buf), "max gradient rel error %.2e, loss rel error %.2e, %d enumeration mismatches",
                  worst, loss_err, mismatches);
    return {worst < 1e-3 && loss_err < 1e-3 && mismatches == 0, buf};
}

Outcome determinism(Workspace& w)
{
    require_full(w);
    std::string detail;
    bool ok = true;
    auto twice = [&](const std::string& stage, const RunConfig& cfg) {
        const auto a = pipeline::run(stage, cfg).summary.at("summary_sha256").get<std::string>();
        const auto b = pipeline::run(stage, cfg).summary.at("summary_sha256").get<std::string>();
        ok = ok && a == b;
        detail += stage + (a == b ? " same" : " DIFFERS") + "; ";
    };
    RunConfig eval = w.desk;
    eval.set("input.generator", generator_dir(w).string());
    twice("evaluate", eval);
    twice("synth-impressions", w.desk);
    RunConfig gen = w.desk;
    gen.set("input.impressions", (w.full.run_dir / "impressions").string());
    gen.set("train.epochs", "3");
    twice("train-generator", gen);
    RunConfig toy = RunConfig::load(fs::path(CIUAP_SOURCE_DIR) / "configs" / "toy.cfg");
    toy.set("output_dir", (w.root / "toy-runs").string());
    toy.set("registry", (w.root / "toy-registry").string());
    twice("full-pipeline", toy);
    return {ok, detail};
}

} // namespace

int main(int argc, char** argv)
{
    const fs::path root = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "ciuap-acceptance";
    fs::remove_all(root);
    fs::create_directories(root);
    ::unsetenv("CIUAP_REGISTRY");

    Workspace w;
    w.root = root;
    w.desk = RunConfig::load(fs::path(CIUAP_SOURCE_DIR) / "configs" / "gratings.cfg");
    w.desk.set("output_dir", (root / "runs").string());
    w.desk.set("registry", (root / "registry").string());

    // Listed in criterion order; the desk run happens inside criterion 3, so
    // it is evaluated first.
    struct Criterion {
        int number;
        std::string name;
        std::function<Outcome(Workspace&)> check;
    };
    const std::vector<Criterion> criteria = {
        {3, "attack effectiveness", attack_effectiveness},
        {1, "norm certificate", norm_certificate},
        {2, "impression validity", impression_validity},
        {4, "transfer structure", transfer_structure},
        {5, "diversity", diversity},
        {6, "interpolation smoothness", interpolation},
        {7, "adversarial training response", adversarial_training},
        {8, "numerical correctness", numerical_correctness},
        {9, "determinism", determinism},
    };
    std::vector<std::pair<int, std::string>> lines;
    bool all = true;
    for (const auto& c : criteria) {
        const auto t0 = Clock::now();
        Outcome o;
        try {
            o = c.check(w);
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        all = all && o.pass;
        const std::string line = std::string(o.pass ? "PASS" : "FAIL") + " [" + std::to_string(c.number) + "] " +
                                 c.name + ": " + o.detail + " (" + fmt(seconds_since(t0)) + " s)";
        std::cerr << line << std::endl;
        lines.emplace_back(c.number, line);
    }
    std::sort(lines.begin(), lines.end());
    for (const auto& [n, line] : lines) std::cout << line << "\n";
    return all ? 0 : 1;
}
