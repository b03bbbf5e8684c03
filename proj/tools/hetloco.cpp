// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The hetloco Authors

// hetloco: train, perf, verify and ablate subcommands.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "checks.hpp"
#include "hetloco/hetloco.hpp"
#include "hetloco/io.hpp"

namespace fs = std::filesystem;
using namespace hetloco;
using io::json;

namespace {

enum Exit : int { kOk = 0, kOther = 1, kUsage = 2, kCorpus = 3, kNumerical = 4, kVerify = 5 };

struct Common {
    std::string config;
    std::string out;
    long long seed = -1;
    std::size_t threads = 0;
};

io::RunConfig resolve(const Common& c) {
    io::RunConfig rc = c.config.empty() ? io::parse_config(json::object()) : io::load_config(c.config);
    if (c.seed >= 0) {
        const auto s = static_cast<std::uint64_t>(c.seed);
        rc.cluster.model_seed = s;
        rc.cluster.data_seed = s + 100;
        rc.cluster.basis_seed = s + 200;
    }
    if (c.threads > 0) {
        rc.cluster.threads = c.threads;
    }
    if (!c.out.empty()) {
        rc.out_dir = c.out;
    }
    // A relative corpus path that does not exist from the working directory is tried next to the config.
    if (!c.config.empty() && fs::path(rc.corpus).is_relative() && !fs::exists(rc.corpus)) {
        const auto alt = fs::path(c.config).parent_path() / rc.corpus;
        if (fs::exists(alt)) {
            rc.corpus = alt.string();
        }
    }
    rc.cluster.validate();
    return rc;
}

template <Real T>
RunResult<T> train_once(const io::RunConfig& rc, const Corpus& corpus, std::ostream* stream) {
    return run_experiment<T>(rc.cluster, corpus, [&](const RoundRecord& r) {
        if (stream) {
            *stream << io::to_json(r).dump() << "\n";
            stream->flush();
        }
        std::cerr << "round " << r.round << "  eval " << io::fmt(r.eval_loss) << "  pp " << r.pp_bytes << " B  dp "
                  << r.dp_bytes << " B\n";
    });
}

template <Real T>
void write_run(const io::RunConfig& rc, const RunResult<T>& res) {
    const fs::path out(rc.out_dir);
    const auto cfg = io::to_json(rc);
    io::atomic_write(out / "config.json", json{{"version", io::version()}, {"config", cfg}}.dump(2) + "\n");
    io::atomic_write(out / "report.json", io::to_json(res.report, rc).dump(2) + "\n");
    io::atomic_write(out / "metrics.csv", io::metrics_csv(res.report));
    const auto ck = io::make_checkpoint(res.params, res.buffers, cfg);
    io::atomic_write(out / "checkpoint.bin", ck.blob);
    io::atomic_write(out / "checkpoint.json", ck.manifest.dump(2) + "\n");
}

template <Real T>
int train_typed(const io::RunConfig& rc) {
    const auto corpus = load_corpus(rc.corpus, rc.eval_fraction);
    fs::create_directories(rc.out_dir);
    std::ofstream log(fs::path(rc.out_dir) / "rounds.jsonl", std::ios::trunc);
    const auto res = train_once<T>(rc, corpus, &log);
    write_run(rc, res);
    std::cout << "initial eval loss " << io::fmt(res.report.initial_eval_loss) << "\nfinal eval loss "
              << io::fmt(res.report.final_eval_loss) << "\nreport written to " << rc.out_dir << "\n";
    return kOk;
}

int cmd_train(const Common& c) {
    const auto rc = resolve(c);
    return rc.cluster.model.precision_bits == 64 ? train_typed<double>(rc) : train_typed<float>(rc);
}

int cmd_perf(const Common& c) {
    const auto rc = resolve(c);
    const auto& p = rc.perf;
    if (p.bandwidths_bps.empty() || p.ratios.empty()) {
        throw ConfigError("perf grid is empty", "perf.bandwidths_bps");
    }
    p.scenario.validate();
    const auto rows = perf::sweep(p.scenario, p.hardware, p.ratios, p.bandwidths_bps, p.total_steps, p.latency_s);
    std::ostringstream csv;
    csv << "bandwidth_bps,k_over_d,utilization,wallclock_s\n";
    for (const auto& r : rows) {
        csv << io::fmt(r.bandwidth_bps) << ',' << io::fmt(r.k_over_d) << ',' << io::fmt(r.utilization) << ','
            << io::fmt(r.wallclock_s) << '\n';
    }

    // Wall-clock comparison: compressed run on more tokens against an uncompressed run.
    perf::PerfScenario cmp = p.scenario;
    cmp.params = p.compare_params;
    cmp.d_model = p.compare_d_model;
    perf::PerfScenario unc = cmp;
    unc.k_over_d = 1.0;
    const perf::LinkSpec link{p.compare_bandwidth_bps, p.latency_s};
    const double steps_c = p.compressed_tokens / cmp.tokens_per_step();
    const double steps_u = p.uncompressed_tokens / unc.tokens_per_step();
    const double wc = perf::wallclock(cmp, p.hardware, link, steps_c);
    const double wu = perf::wallclock(unc, p.hardware, link, steps_u);
    std::ostringstream wcsv;
    wcsv << "run,k_over_d,tokens,steps,bandwidth_bps,utilization,wallclock_s\n";
    wcsv << "compressed," << io::fmt(cmp.k_over_d) << ',' << io::fmt(p.compressed_tokens) << ',' << io::fmt(steps_c)
         << ',' << io::fmt(link.bandwidth_bps) << ',' << io::fmt(perf::utilization(cmp, p.hardware, link)) << ','
         << io::fmt(wc) << '\n';
    wcsv << "uncompressed,1," << io::fmt(p.uncompressed_tokens) << ',' << io::fmt(steps_u) << ','
         << io::fmt(link.bandwidth_bps) << ',' << io::fmt(perf::utilization(unc, p.hardware, link)) << ','
         << io::fmt(wu) << '\n';

    const fs::path out(rc.out_dir);
    io::atomic_write(out / "sweep.csv", csv.str());
    io::atomic_write(out / "wallclock.csv", wcsv.str());
    const json echo{{"version", io::version()},
                    {"scenario", io::to_json(p.scenario)},
                    {"peak_flops", p.hardware.peak_flops},
                    {"mfu", p.hardware.mfu},
                    {"latency_s", p.latency_s},
                    {"step_compute_time_s", perf::step_compute_time(p.scenario, p.hardware)},
                    {"compare_scenario", io::to_json(cmp)},
                    {"config", io::to_json(rc)}};
    io::atomic_write(out / "perf.json", echo.dump(2) + "\n");
    std::cout << csv.str() << "\n" << wcsv.str();
    return kOk;
}

int cmd_verify(const std::string& filter, const std::string& golden_dir, const std::string& corpus,
               const std::string& regen) {
    if (!regen.empty()) {
        verify::write_goldens(regen);
        std::cout << "golden files written to " << regen << "\n";
        return kOk;
    }
    auto opt = verify::default_options();
    if (!golden_dir.empty()) {
        opt.golden_dir = golden_dir;
    }
    if (!corpus.empty()) {
        opt.corpus_path = corpus;
    }
    opt.log = &std::cout;
    const int failures = verify::run_checks(verify::all_checks(opt), filter, std::cout);
    return failures == 0 ? kOk : kVerify;
}

int cmd_ablate(const Common& c, std::size_t n_seeds) {
    const auto base = resolve(c);
    if (n_seeds == 0) {
        throw ConfigError("--seeds must be >= 1", "seeds");
    }
    const auto corpus = load_corpus(base.corpus, base.eval_fraction);
    std::ostringstream runs;
    runs << "embed_adapt,project_weights,seed,initial_eval_loss,final_eval_loss\n";
    std::ostringstream grid;
    grid << "embed_adapt,project_weights,seeds,mean_final_eval_loss\n";
    json audit = json::array();
    double adapt_on = 0.0, adapt_off = 0.0;
    for (bool adapt : {true, false}) {
        for (bool proj : {false, true}) {
            double sum = 0.0;
            for (std::size_t i = 0; i < n_seeds; ++i) {
                io::RunConfig rc = base;
                rc.cluster.embed_adapt = adapt;
                rc.cluster.project_weights = proj;
                rc.cluster.model_seed = base.cluster.model_seed + i;
                rc.cluster.data_seed = base.cluster.data_seed + i;
                rc.cluster.basis_seed = base.cluster.basis_seed + i;
                std::cerr << "ablate: adapt=" << adapt << " project=" << proj << " seed " << rc.cluster.model_seed
                          << "\n";
                const RunReport rep = rc.cluster.model.precision_bits == 64
                                          ? run_experiment<double>(rc.cluster, corpus).report
                                          : run_experiment<float>(rc.cluster, corpus).report;
                const double fin = rep.final_eval_loss;
                sum += fin;
                runs << adapt << ',' << proj << ',' << rc.cluster.model_seed << ',' << io::fmt(rep.initial_eval_loss)
                     << ',' << io::fmt(fin) << '\n';
                audit.push_back({{"embed_adapt", adapt},
                                 {"project_weights", proj},
                                 {"model_seed", rc.cluster.model_seed},
                                 {"data_seed", rc.cluster.data_seed},
                                 {"basis_seed", rc.cluster.basis_seed},
                                 {"shard_offsets", rep.shard_offsets},
                                 {"final_eval_loss", fin}});
            }
            const double mean = sum / static_cast<double>(n_seeds);
            grid << adapt << ',' << proj << ',' << n_seeds << ',' << io::fmt(mean) << '\n';
            (adapt ? adapt_on : adapt_off) += mean / 2.0;
        }
    }
    const fs::path out(base.out_dir);
    io::atomic_write(out / "ablate.csv", grid.str());
    io::atomic_write(out / "ablate_runs.csv", runs.str());
    const json rep{{"version", io::version()},
                   {"config", io::to_json(base)},
                   {"runs", audit},
                   {"adaptation_helps", adapt_on <= adapt_off},
                   {"mean_loss_with_adaptation", adapt_on},
                   {"mean_loss_without_adaptation", adapt_off}};
    io::atomic_write(out / "ablate.json", rep.dump(2) + "\n");
    std::cout << grid.str() << "adaptation " << (adapt_on <= adapt_off ? "lowers" : "does not lower")
              << " the seed-averaged loss (" << io::fmt(adapt_on) << " vs " << io::fmt(adapt_off) << ")\n";
    return kOk;
}

void add_common(CLI::App* app, Common& c, bool need_config) {
    auto* opt = app->add_option("--config", c.config, "JSON run configuration");
    if (need_config) {
        opt->required()->check(CLI::ExistingFile);
    }
    app->add_option("--out", c.out, "Output directory (overrides output.dir)");
    app->add_option("--seed", c.seed, "Seed override: model N, data N+100, basis N+200")->check(CLI::NonNegativeNumber);
    app->add_option("--threads", c.threads, "Replica worker threads")->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"hetloco: heterogeneous low-communication training simulator"};
    app.set_version_flag("--version", std::string(io::version()));
    app.require_subcommand(1);

    Common train_c, perf_c, ablate_c;
    auto* train = app.add_subcommand("train", "Run a training experiment");
    add_common(train, train_c, true);

    auto* perf_cmd = app.add_subcommand("perf", "Bandwidth sweep and wall-clock comparison");
    add_common(perf_cmd, perf_c, false);

    std::string filter, golden_dir, corpus, regen;
    auto* verify_cmd = app.add_subcommand("verify", "Run the verification suite");
    verify_cmd->add_option("--filter", filter, "Run checks whose name contains this string");
    verify_cmd->add_option("--golden-dir", golden_dir, "Directory holding golden files");
    verify_cmd->add_option("--corpus", corpus, "Corpus used by run-level checks");
    verify_cmd->add_option("--write-goldens", regen, "Regenerate golden files into DIR and exit");

    std::size_t n_seeds = 3;
    auto* ablate = app.add_subcommand("ablate", "Embedding adaptation x weight projection grid");
    add_common(ablate, ablate_c, true);
    ablate->add_option("--seeds", n_seeds, "Seeds per grid cell");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*train) {
            return cmd_train(train_c);
        }
        if (*perf_cmd) {
            return cmd_perf(perf_c);
        }
        if (*verify_cmd) {
            return cmd_verify(filter, golden_dir, corpus, regen);
        }
        if (*ablate) {
            return cmd_ablate(ablate_c, n_seeds);
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error" << (e.key().empty() ? "" : " [" + e.key() + "]") << ": " << e.what() << "\n";
        return kUsage;
    } catch (const CorpusError& e) {
        std::cerr << "corpus error: " << e.what() << "\n";
        return kCorpus;
    } catch (const NumericalError& e) {
        std::cerr << "numerical error";
        if (e.replica() >= 0) {
            std::cerr << " (replica " << e.replica() << ")";
        }
        if (e.stage() >= 0) {
            std::cerr << " (stage " << e.stage() << ")";
        }
        std::cerr << ": " << e.what() << "\n";
        return kNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kOther;
    }
    return kOther;
}
