// fedgnp: desk-scale federated fine-tuning simulator with the noisy-projection
// robust aggregation step. Subcommands: gen-data, partition, run, sweep, report.
// Exit codes: 0 success, 1 configuration error, 2 runtime failure.

#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "fedgnp/datagen.hpp"
#include "fedgnp/harness.hpp"

namespace fs = std::filesystem;

namespace {

int cmd_gen_data(const std::string& config_path, const std::string& out_dir) {
    const fedgnp::ExperimentSpec spec = fedgnp::load_config(config_path);
    const fedgnp::FedConfig& cfg = spec.base;
    const std::uint64_t seed = fedgnp::mix_seed(spec.seeds.front(), fedgnp::kTagData);
    const fedgnp::GeneratedData data =
        fedgnp::generate(seed, cfg.n_train, cfg.n_test, cfg.feature_dim, cfg.num_classes, cfg.shifts);
    fs::create_directories(out_dir);
    fedgnp::save_dataset(data.id_train, (fs::path(out_dir) / "id_train.txt").string());
    fedgnp::save_dataset(data.id_test, (fs::path(out_dir) / "id_test.txt").string());
    for (std::size_t i = 0; i < data.ood_tests.size(); ++i) {
        fedgnp::save_dataset(data.ood_tests[i],
                             (fs::path(out_dir) / ("ood_" + std::to_string(i + 1) + ".txt")).string());
    }
    std::cout << "wrote " << (2 + data.ood_tests.size()) << " datasets to " << out_dir << "\n";
    return 0;
}

int cmd_partition(const std::string& data_path, double alpha, std::size_t clients, std::uint64_t seed,
                  const std::string& out_path) {
    const fedgnp::Dataset ds = fedgnp::load_dataset(data_path);
    const fedgnp::Partition part = fedgnp::dirichlet_partition(ds, clients, alpha, seed);
    fedgnp::save_partition(part, out_path);
    const fedgnp::PairwiseJs js = fedgnp::pairwise_js(part, ds);
    std::cout << "partitioned " << ds.size() << " samples across " << clients << " clients (alpha=" << alpha
              << ", mean pairwise JS=" << fedgnp::format_double(js.mean_upper) << ") -> " << out_path << "\n";
    return 0;
}

int cmd_run(const std::string& config_path, const std::string& out_dir) {
    fedgnp::ExperimentSpec spec = fedgnp::load_config(config_path);
    if (spec.alphas.size() != 1 || spec.masks.size() != 1 || spec.gnp_flags.size() != 1 || spec.seeds.size() != 1) {
        throw fedgnp::ConfigError("run expects a single-cell config (one alpha, mask, gnp flag and seed); "
                                  "use 'sweep' for grids");
    }
    if (!out_dir.empty()) {
        spec.out_dir = out_dir;
    }
    fs::create_directories(spec.out_dir);
    const fedgnp::FedConfig cfg =
        fedgnp::cell_config(spec, spec.alphas[0], spec.masks[0], spec.gnp_flags[0] != 0, spec.seeds[0]);
    const auto rows = fedgnp::run_cell(cfg);
    const std::string name = fedgnp::cell_filename(cfg.alpha, cfg.mask, cfg.gnp_enabled, cfg.seed);
    fedgnp::write_csv((fs::path(spec.out_dir) / name).string(), rows);
    const fedgnp::MetricsRow& last = rows.back();
    std::cout << "run complete: " << rows.size() << " rounds, final id_acc=" << fedgnp::format_double(last.id_acc)
              << ", mean ood_acc=" << fedgnp::format_double(last.mean_ood()) << " -> " << name << "\n";
    return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& out_dir) {
    fedgnp::ExperimentSpec spec = fedgnp::load_config(config_path);
    if (!out_dir.empty()) {
        spec.out_dir = out_dir;
    }
    const fedgnp::SweepResult result = fedgnp::run_sweep(spec);
    std::cout << "sweep complete: " << result.table.rows.size() << " rows";
    if (!result.errors.empty()) {
        std::cout << ", " << result.errors.size() << " failed cells";
        for (const auto& err : result.errors) {
            std::cerr << "cell " << err.cell << " failed: " << err.message << "\n";
        }
    }
    std::cout << " -> " << spec.out_dir << "/summary.csv\n";
    return result.errors.empty() ? 0 : 2;
}

int cmd_report(const std::string& in_dir, const std::string& out_dir) {
    const fs::path summary = fs::path(in_dir) / "summary.csv";
    if (!fs::exists(summary)) {
        throw fedgnp::ConfigError("no summary.csv in " + in_dir + "; run 'sweep' first");
    }
    fedgnp::MetricsTable table;
    table.rows = fedgnp::parse_csv(summary.string());
    const fedgnp::ReportResult rep = fedgnp::report(table, out_dir);
    std::cout << "report written to " << out_dir << " (accuracy_grid.csv, indicator_series.csv, "
              << "directional_summary.txt)\n";
    if (!rep.complete) {
        std::cout << "note: partial report, some gnp on/off counterparts missing\n";
    }
    for (const auto& check : rep.checks) {
        if (check.evaluable) {
            std::cout << check.name << ": " << (check.pass ? "PASS" : "FAIL") << "\n";
        }
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"fedgnp: federated fine-tuning simulator with noisy-projection robust aggregation"};
    app.require_subcommand(1);

    std::string config_path, out_dir, data_path, in_dir;
    double alpha = 1.0;
    std::size_t clients = 10;
    std::uint64_t seed = 1;
    std::string partition_out = "partition.json";

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic ID/OOD datasets");
    gen->add_option("--config", config_path, "experiment config JSON")->required();
    gen->add_option("--out", out_dir, "output directory")->required();

    auto* part = app.add_subcommand("partition", "dirichlet label-skew partition of a dataset file");
    part->add_option("--data", data_path, "dataset file (gen-data text format)")->required();
    part->add_option("--alpha", alpha, "dirichlet concentration")->required();
    part->add_option("--clients", clients, "number of clients")->required();
    part->add_option("--seed", seed, "partition seed")->required();
    part->add_option("--out", partition_out, "output JSON path");

    auto* runcmd = app.add_subcommand("run", "run a single federated training cell");
    runcmd->add_option("--config", config_path, "experiment config JSON")->required();
    runcmd->add_option("--out", out_dir, "output directory (overrides config out_dir)");

    auto* sweep = app.add_subcommand("sweep", "run the full alpha x mask x gnp x seed grid");
    sweep->add_option("--config", config_path, "experiment config JSON")->required();
    sweep->add_option("--out", out_dir, "output directory (overrides config out_dir)");

    auto* rep = app.add_subcommand("report", "summarize a sweep into plot-ready CSVs");
    rep->add_option("--in", in_dir, "sweep output directory")->required();
    rep->add_option("--out", out_dir, "report output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            return cmd_gen_data(config_path, out_dir);
        }
        if (part->parsed()) {
            return cmd_partition(data_path, alpha, clients, seed, partition_out);
        }
        if (runcmd->parsed()) {
            return cmd_run(config_path, out_dir);
        }
        if (sweep->parsed()) {
            return cmd_sweep(config_path, out_dir);
        }
        if (rep->parsed()) {
            return cmd_report(in_dir, out_dir);
        }
    } catch (const fedgnp::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
