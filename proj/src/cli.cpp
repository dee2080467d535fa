#include "solens/cli.hpp"

#include <functional>
#include <map>
#include <optional>

#include <CLI11.hpp>

#include "solens/config.hpp"
#include "solens/errors.hpp"
#include "solens/pipeline.hpp"

namespace solens {

namespace {

// Values given on the command line. Unset options leave the config untouched.
struct Overrides {
    std::string config;
    std::optional<std::string> weights, images, reference_images, pool, classes, masks, out;
    std::optional<std::vector<int>> layers;
    std::optional<int> m, support_size, k, segment_k, Q, top_phrases, discover_top;
    std::optional<double> threshold, percentile;
    std::optional<std::string> percentile_scope, storage, mode;
    std::optional<std::uint64_t> seed;
    std::optional<int> class_a, class_b, class_index, image, jobs;
    bool no_bias_shares = false;
    bool center_on_support = false;
    bool force = false;

    void apply(RunConfig& c) const {
        auto set = [](auto& dst, const auto& src) {
            if (src) dst = *src;
        };
        set(c.weights, weights);
        set(c.images, images);
        set(c.reference_images, reference_images);
        set(c.pool, pool);
        set(c.classes, classes);
        set(c.masks, masks);
        set(c.output, out);
        set(c.layers, layers);
        set(c.m, m);
        set(c.support_size, support_size);
        set(c.k, k);
        set(c.segment_k, segment_k);
        set(c.Q, Q);
        set(c.top_phrases, top_phrases);
        set(c.discover_top, discover_top);
        set(c.threshold, threshold);
        set(c.percentile, percentile);
        set(c.percentile_scope, percentile_scope);
        set(c.storage, storage);
        set(c.mode, mode);
        set(c.seed, seed);
        set(c.class_a, class_a);
        set(c.class_b, class_b);
        set(c.class_index, class_index);
        set(c.image, image);
        set(c.jobs, jobs);
        if (no_bias_shares) c.bias_shares = false;
        if (center_on_support) c.center_on_support = true;
        if (force) c.force = true;
    }
};

void add_options(CLI::App& app, Overrides& o) {
    app.add_option("--config", o.config, "JSON run configuration");
    app.add_option("--weights", o.weights, "weights container");
    app.add_option("--images", o.images, "evaluation image container");
    app.add_option("--reference-images", o.reference_images, "reference image container");
    app.add_option("--pool", o.pool, "text pool container");
    app.add_option("--classes", o.classes, "class embedding container");
    app.add_option("--masks", o.masks, "ground-truth mask container");
    app.add_option("--out", o.out, "output directory");
    app.add_option("--layers", o.layers, "layer list")->delimiter(',');
    app.add_option("--m", o.m, "phrases per neuron");
    app.add_option("--support-size", o.support_size, "top-norm effects used for the rank-1 fit");
    app.add_option("--k", o.k, "neurons selected for class-pair mining");
    app.add_option("--segment-k", o.segment_k, "neurons selected for segmentation");
    app.add_option("--Q", o.Q, "large-norm images per neuron for ablation");
    app.add_option("--top-phrases", o.top_phrases, "phrases reported by spurious");
    app.add_option("--discover-top", o.discover_top, "phrases reported by discover");
    app.add_option("--threshold", o.threshold, "segmentation threshold");
    app.add_option("--percentile", o.percentile, "activation percentile for discover");
    app.add_option("--percentile-scope", o.percentile_scope, "per_neuron or global");
    app.add_option("--storage", o.storage, "full or topq");
    app.add_option("--mode", o.mode, "ablation mode");
    app.add_option("--seed", o.seed, "random seed");
    app.add_option("--class-a", o.class_a, "source class index");
    app.add_option("--class-b", o.class_b, "target class index");
    app.add_option("--class-index", o.class_index, "segmentation class (-1: image label)");
    app.add_option("--image", o.image, "discover target image (-1: all)");
    app.add_option("--jobs", o.jobs, "worker threads (0: available parallelism)");
    app.add_flag("--no-bias-shares", o.no_bias_shares, "drop the LayerNorm bias-share terms");
    app.add_flag("--center-on-support", o.center_on_support, "center the rank-1 fit on the support mean");
    app.add_flag("--force", o.force, "overwrite existing outputs");
}

}  // namespace

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Second-order effects of MLP neurons in CLIP-style ViTs", "solens"};
    app.require_subcommand(1);
    Overrides o;

    struct Command {
        std::string name;
        std::string help;
        std::function<void(const RunConfig&)> run;
    };
    const std::vector<Command> commands = {
        {"gen-toy", "write a random toy model, images, pool, classes, masks and config", {}},  // needs the raw --out
        {"trace", "forward the evaluation and reference images and store traces", run_trace},
        {"effects", "second-order effects of every neuron in the configured layers", run_effects},
        {"rank1", "fit one direction per neuron and report variance explained", run_rank1},
        {"decompose", "sparse text decomposition of each neuron direction", run_decompose},
        {"ablate", "mean-ablation accuracy for the configured mode", run_ablate},
        {"spurious", "phrases that separate class-a from class-b", run_spurious},
        {"discover", "concepts active in one image", run_discover},
        {"segment", "class heatmaps and masks for the evaluation images", run_segment},
        {"metrics", "pixel accuracy, mIoU and mAP of the segment outputs", run_metrics},
    };
    std::map<std::string, CLI::App*> subs;
    for (const auto& [name, help, fn] : commands) {
        auto* sub = app.add_subcommand(name, help);
        add_options(*sub, o);
        subs[name] = sub;
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? 0 : 1;
    }

    try {
        RunConfig config = o.config.empty() ? RunConfig{} : load_config(o.config);
        o.apply(config);
        config.validate();
        for (const auto& [name, help, fn] : commands) {
            if (!subs[name]->parsed()) continue;
            if (name == "gen-toy") {
                if (!o.out) throw ValidationError("gen-toy requires --out");
                run_gen_toy(config, *o.out);
                out << "wrote toy fixture to " << *o.out << "\n";
            } else {
                fn(config);
                out << name << ": outputs under " << config.output.string() << "\n";
            }
        }
        return 0;
    } catch (const ValidationError& e) {
        err << "solens: " << e.what() << "\n";
        return 1;
    } catch (const NumericalError& e) {
        err << "solens: " << e.what() << " (layer " << e.layer() << ")\n";
        return 1;
    } catch (const IoError& e) {
        err << "solens: " << e.what() << "\n";
        return 2;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "solens: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "solens: " << e.what() << "\n";
        return 1;
    }
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    std::vector<const char*> argv{"solens"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace solens
