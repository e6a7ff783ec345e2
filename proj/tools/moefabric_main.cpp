// moefabric CLI: runs forward-pass experiments over the simulated device
// group, emits metric reports and traces, checks the runtime against the
// dense oracle, and prints the memory sizing table.

#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "moefabric/harness.hpp"

namespace {

using namespace moefabric;

int cmd_run(const std::string& config_path, const std::string& mode, const std::string& straggler,
            bool table_memory, const std::string& trace_path, const std::string& report_path,
            const std::string& csv_path, std::uint64_t seed, bool seed_set) {
    if (table_memory) {
        std::cout << harness::memory_table_text();
        return 0;
    }
    if (config_path.empty()) {
        std::cerr << "run: --config is required unless --table is given\n";
        return 2;
    }
    harness::ExperimentConfig exp = harness::load_config(config_path);
    if (seed_set) exp.moe.seed = seed;

    ForwardOptions opts;
    opts.processors = exp.processors;
    opts.seed = exp.moe.seed;
    if (mode == "sequential") opts.mode = ScheduleMode::sequential;
    else if (mode == "overlapped" || mode == "oracle-check") opts.mode = ScheduleMode::overlapped;
    else {
        std::cerr << "unknown mode: " << mode << "\n";
        return 2;
    }

    const ModelWeights model = harness::make_model(exp.moe, exp.moe.seed);
    const std::vector<TokenMatrix> shards = harness::make_shards(exp.moe, exp.moe.seed);

    if (mode == "oracle-check") {
        const double err = harness::oracle_check(exp.moe, shards, model, opts);
        std::printf("oracle-check: max relative error %.3e (tolerance 1e-5)\n", err);
        return err <= 1e-5 ? 0 : 1;
    }

    if (!straggler.empty()) {
        opts.straggler = harness::parse_straggler(straggler);
        if (opts.straggler.kind == StragglerSpec::Kind::lognormal && opts.straggler.a <= 0.0) {
            // calibrate the median to 3x an unstraggled makespan
            ForwardOptions probe = opts;
            probe.straggler = {};
            ForwardResult r = forward(exp.moe, shards, model, probe);
            opts.straggler.a = 3.0 * static_cast<double>(r.makespan_ns) / 1e6;
            std::printf("straggler: lognormal median calibrated to %.2f ms\n", opts.straggler.a);
        }
    }

    harness::RunMetrics metrics = harness::run_passes(exp, shards, model, opts);
    nlohmann::json report = harness::report_json(exp, opts, metrics);

    if (!straggler.empty()) {
        // the schedule comparison: same seeds, same delays, other schedule
        ForwardOptions other = opts;
        other.mode = opts.mode == ScheduleMode::sequential ? ScheduleMode::overlapped
                                                           : ScheduleMode::sequential;
        harness::RunMetrics om = harness::run_passes(exp, shards, model, other);
        const auto& over = opts.mode == ScheduleMode::overlapped ? metrics : om;
        const auto& seq = opts.mode == ScheduleMode::overlapped ? om : metrics;
        report["overlap_comparison"] = {
            {"overlapped_median_ns", over.median_ns},
            {"sequential_median_ns", seq.median_ns},
            {"makespan_ratio",
             static_cast<double>(over.median_ns) / static_cast<double>(seq.median_ns)}};
        std::printf("overlapped %.3f ms vs sequential %.3f ms (ratio %.3f)\n",
                    over.median_ns / 1e6, seq.median_ns / 1e6,
                    static_cast<double>(over.median_ns) / static_cast<double>(seq.median_ns));
    }

    if (!trace_path.empty()) harness::write_trace_jsonl(trace_path, metrics.last.trace);
    if (!csv_path.empty()) harness::write_bytes_csv(csv_path, metrics.last, exp.moe.devices);
    if (!report_path.empty()) {
        std::ofstream out(report_path);
        out << report.dump(2) << "\n";
    }

    std::printf("passes: %d warmup + %d measured; median %.3f ms, mean %.3f ms\n", exp.warmup,
                exp.measured, metrics.median_ns / 1e6, metrics.mean_ns / 1e6);
    std::printf("tasks total: %lld; remote bytes: %llu efficient / %llu padded baseline\n",
                static_cast<long long>(report["tasks"]["total"].get<std::int64_t>()),
                static_cast<unsigned long long>(harness::remote_total(metrics.last.bytes, exp.moe.devices)),
                static_cast<unsigned long long>(
                    harness::remote_total(metrics.last.bytes_padded, exp.moe.devices)));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"simulated single-launch distributed MoE operator"};
    app.require_subcommand(1);

    auto* run = app.add_subcommand("run", "execute forward passes and report metrics");
    std::string config_path, mode = "overlapped", straggler, trace_path, report_path, csv_path;
    std::string table;
    std::uint64_t seed = 0;
    run->add_option("--config", config_path, "experiment config (JSON)");
    run->add_option("--mode", mode, "overlapped | sequential | oracle-check");
    run->add_option("--straggler", straggler,
                    "constant:<ms> | uniform:<lo>,<hi> | lognormal:[<median_ms>,]<sigma> (optional @device)");
    run->add_option("--table", table, "print a builtin table: memory");
    run->add_option("--trace", trace_path, "write the last pass's event trace (JSON lines)");
    run->add_option("--report", report_path, "write the metrics report (JSON)");
    run->add_option("--bytes-csv", csv_path, "write the per-(src,dst) byte matrix (CSV)");
    auto* seed_opt = run->add_option("--seed", seed, "override the config seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (!table.empty() && table != "memory") {
            std::cerr << "unknown table: " << table << "\n";
            return 2;
        }
        return cmd_run(config_path, mode, straggler, table == "memory", trace_path, report_path,
                       csv_path, seed, seed_opt->count() > 0);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
