// nfkit-bench: runs an experiment spec (objective x conditioning matrix over
// seeds) and writes aggregate tables plus pass/fail per named threshold.

#include <cstdio>
#include <cstring>

#include "nfkit/bench.hpp"

int main(int argc, char** argv) {
    std::string spec_path, out_dir = "bench/results";
    for (int i = 1; i < argc; ++i) {
        if (std::strcmp(argv[i], "--spec") == 0 && i + 1 < argc) spec_path = argv[++i];
        else if (std::strcmp(argv[i], "--out") == 0 && i + 1 < argc) out_dir = argv[++i];
        else if (std::strcmp(argv[i], "--help") == 0) {
            std::printf("usage: nfkit-bench --spec <file> [--out <dir>]\n");
            return 0;
        } else {
            std::fprintf(stderr, "unknown argument: %s\n", argv[i]);
            return 2;
        }
    }
    if (spec_path.empty()) {
        std::fprintf(stderr, "usage: nfkit-bench --spec <file> [--out <dir>]\n");
        return 2;
    }

    try {
        auto spec = nfkit::bench::ExperimentSpec::parse_file(spec_path);
        auto result = nfkit::bench::run_experiment(spec, out_dir);
        std::printf("%s", result.markdown.c_str());
        if (result.any_run_failed) {
            std::fprintf(stderr, "experiment failed; see %s/%s/results.tsv\n", out_dir.c_str(),
                         spec.name.c_str());
            return 3;
        }
        return result.all_passed ? 0 : 1;
    } catch (const nfkit::param_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const nfkit::format_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "runtime failure: %s\n", e.what());
        return 3;
    }
}
