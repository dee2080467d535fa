#include "solens/applications.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "solens/errors.hpp"

namespace solens {

using Eigen::VectorXf;

namespace {

const SparseCode& find_code(std::span<const SparseCode> codes, int layer, int neuron) {
    for (const auto& c : codes)
        if (c.layer == layer && c.neuron == neuron) return c;
    throw ValidationError("no sparse code for layer " + std::to_string(layer) + " neuron " + std::to_string(neuron));
}

const NeuronDirection& find_direction(std::span<const NeuronDirection> dirs, int layer, int neuron) {
    for (const auto& d : dirs)
        if (d.layer == layer && d.neuron == neuron) return d;
    throw ValidationError("no direction for layer " + std::to_string(layer) + " neuron " + std::to_string(neuron));
}

PhraseRanking rank(const std::map<int, double>& scores, std::string context) {
    PhraseRanking out;
    out.context = std::move(context);
    for (const auto& [index, score] : scores) {
        if (!std::isfinite(score)) throw ValidationError("non-finite phrase score");
        out.entries.push_back({index, score});
    }
    std::stable_sort(out.entries.begin(), out.entries.end(),
                     [](const PhraseScore& a, const PhraseScore& b) { return a.score > b.score; });
    return out;
}

}  // namespace

std::vector<NeuronRef> select_neurons_by_direction(std::span<const NeuronDirection> directions, const VectorXf& v,
                                                   int k) {
    if (k <= 0) throw ValidationError("select_neurons_by_direction: k must be positive");
    std::vector<NeuronRef> all;
    all.reserve(directions.size());
    for (const auto& d : directions) {
        if (d.r.size() != v.size()) throw ValidationError("direction dimension differs from v");
        all.push_back({d.layer, d.neuron, std::abs(static_cast<double>(d.r.dot(v)))});
    }
    std::sort(all.begin(), all.end(), [](const NeuronRef& a, const NeuronRef& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.layer != b.layer ? a.layer < b.layer : a.neuron < b.neuron;
    });
    all.resize(std::min(all.size(), static_cast<std::size_t>(k)));
    return all;
}

PhraseRanking contribution_scores(std::span<const NeuronRef> neurons, std::span<const SparseCode> codes,
                                  std::span<const NeuronDirection> directions, const VectorXf& v) {
    std::map<int, double> scores;
    for (const auto& n : neurons) {
        const SparseCode& code = find_code(codes, n.layer, n.neuron);
        const double along = find_direction(directions, n.layer, n.neuron).r.dot(v);
        for (std::size_t j = 0; j < code.indices.size(); ++j) scores[code.indices[j]] += code.gamma[j] * along;
    }
    return rank(scores, "class-pair direction");
}

ClassDirection classification_direction(const VectorXf& class_a, const VectorXf& class_b) {
    if (class_a.size() != class_b.size()) throw ValidationError("class embeddings differ in dimension");
    ClassDirection out{class_b - class_a, false};
    out.degenerate = out.v.norm() == 0.0f;
    return out;
}

namespace {

float percentile_of(std::vector<float> values, double percentile) {
    if (values.empty()) throw ValidationError("percentile of an empty set");
    std::sort(values.begin(), values.end());
    const double pos = percentile / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    const double t = pos - static_cast<double>(lo);
    return static_cast<float>(values[lo] + t * (values[hi] - values[lo]));
}

}  // namespace

PercentileTable percentile_table(const SecondOrderField& reference, double percentile, PercentileScope scope) {
    if (percentile < 0.0 || percentile > 100.0) throw ValidationError("percentile must be in [0, 100]");
    if (reference.n_images == 0) throw ValidationError("percentile table needs at least one reference image");
    PercentileTable table{reference.layer, reference.neurons, {}};
    const int n = reference.neuron_count();
    if (scope == PercentileScope::Global) {
        std::vector<float> all(reference.norms.data(), reference.norms.data() + reference.norms.size());
        table.thresholds.assign(static_cast<std::size_t>(n), percentile_of(std::move(all), percentile));
        return table;
    }
    for (int s = 0; s < n; ++s) {
        std::vector<float> col(static_cast<std::size_t>(reference.n_images));
        for (int i = 0; i < reference.n_images; ++i) col[static_cast<std::size_t>(i)] = reference.norms(i, s);
        table.thresholds.push_back(percentile_of(std::move(col), percentile));
    }
    return table;
}

PhraseRanking discover_concepts(std::span<const SecondOrderField> fields, std::span<const PercentileTable> tables,
                                std::span<const SparseCode> codes, int image, int top) {
    std::map<std::pair<int, int>, const SparseCode*> by_neuron;
    for (const auto& c : codes) by_neuron.emplace(std::pair{c.layer, c.neuron}, &c);
    std::map<int, double> scores;
    for (const auto& field : fields) {
        if (image < 0 || image >= field.n_images) throw ValidationError("discover_concepts: image out of range");
        const auto table = std::find_if(tables.begin(), tables.end(),
                                        [&](const PercentileTable& t) { return t.layer == field.layer; });
        if (table == tables.end()) throw ValidationError("no percentile table for layer " + std::to_string(field.layer));
        for (int s = 0; s < field.neuron_count(); ++s) {
            const int neuron = field.neurons[static_cast<std::size_t>(s)];
            // Tables built from the reference field share its slot order.
            auto pos = table->neurons.begin() + s;
            if (s >= static_cast<int>(table->neurons.size()) || *pos != neuron)
                pos = std::find(table->neurons.begin(), table->neurons.end(), neuron);
            if (pos == table->neurons.end()) throw ValidationError("percentile table misses neuron " + std::to_string(neuron));
            const float norm = field.norms(image, s);
            if (!(norm > table->thresholds[static_cast<std::size_t>(pos - table->neurons.begin())])) continue;
            const auto it = by_neuron.find({field.layer, neuron});
            if (it == by_neuron.end())
                throw ValidationError("no sparse code for layer " + std::to_string(field.layer) + " neuron " +
                                      std::to_string(neuron));
            const SparseCode& code = *it->second;
            for (std::size_t j = 0; j < code.indices.size(); ++j) scores[code.indices[j]] += code.gamma[j] * norm;
        }
    }
    PhraseRanking out = rank(scores, "image " + std::to_string(image));
    if (top >= 0 && static_cast<int>(out.entries.size()) > top) out.entries.resize(static_cast<std::size_t>(top));
    return out;
}

std::vector<float> upsample_bilinear(std::span<const float> grid, int g, int size) {
    if (g <= 0 || size <= 0 || static_cast<int>(grid.size()) != g * g) throw ValidationError("upsample: bad grid");
    std::vector<int> i0(static_cast<std::size_t>(size)), i1(static_cast<std::size_t>(size));
    std::vector<float> frac(static_cast<std::size_t>(size));
    const double scale = static_cast<double>(g) / size;
    for (int x = 0; x < size; ++x) {
        const double src = std::clamp((x + 0.5) * scale - 0.5, 0.0, static_cast<double>(g - 1));
        const int lo = static_cast<int>(std::floor(src));
        i0[static_cast<std::size_t>(x)] = lo;
        i1[static_cast<std::size_t>(x)] = std::min(lo + 1, g - 1);
        frac[static_cast<std::size_t>(x)] = static_cast<float>(src - lo);
    }
    std::vector<float> out(static_cast<std::size_t>(size) * static_cast<std::size_t>(size));
    auto at = [&](int y, int x) { return grid[static_cast<std::size_t>(y * g + x)]; };
    for (int y = 0; y < size; ++y) {
        const auto yy = static_cast<std::size_t>(y);
        const float ty = frac[yy];
        for (int x = 0; x < size; ++x) {
            const auto xx = static_cast<std::size_t>(x);
            const float tx = frac[xx];
            const float top = (1 - tx) * at(i0[yy], i0[xx]) + tx * at(i0[yy], i1[xx]);
            const float bottom = (1 - tx) * at(i1[yy], i0[xx]) + tx * at(i1[yy], i1[xx]);
            out[yy * static_cast<std::size_t>(size) + xx] = (1 - ty) * top + ty * bottom;
        }
    }
    return out;
}

Heatmap heatmap_from_neurons(const ImageTrace& trace, std::span<const NeuronRef> neurons, const ModelSpec& spec,
                             float threshold) {
    if (neurons.empty()) throw ValidationError("heatmap needs at least one neuron");
    const int K = spec.patches();
    Eigen::VectorXd avg = Eigen::VectorXd::Zero(K);
    for (const auto& n : neurons) {
        if (n.layer < 0 || n.layer >= static_cast<int>(trace.post_gelu.size()))
            throw ValidationError("trace lacks activations for layer " + std::to_string(n.layer));
        const auto& post = trace.post_gelu[static_cast<std::size_t>(n.layer)];
        if (post.rows() != spec.tokens() || n.neuron < 0 || n.neuron >= post.cols())
            throw ValidationError("trace activations do not match the model spec");
        avg += post.col(n.neuron).segment(1, K).cast<double>();
    }
    avg /= static_cast<double>(neurons.size());

    Heatmap h;
    h.grid = spec.grid();
    h.size = spec.image_size;
    const double lo = avg.minCoeff(), hi = avg.maxCoeff();
    h.grid_scores.resize(static_cast<std::size_t>(K));
    if (!(hi - lo > 0.0)) {
        h.degenerate = true;
        std::fill(h.grid_scores.begin(), h.grid_scores.end(), 0.5f);
    } else {
        for (int k = 0; k < K; ++k) h.grid_scores[static_cast<std::size_t>(k)] = static_cast<float>((avg(k) - lo) / (hi - lo));
    }
    h.upsampled = upsample_bilinear(h.grid_scores, h.grid, h.size);
    h.mask.resize(h.upsampled.size());
    for (std::size_t i = 0; i < h.upsampled.size(); ++i) h.mask[i] = h.upsampled[i] >= threshold ? 1 : 0;
    return h;
}

Heatmap segment(const ImageTrace& trace, std::span<const NeuronDirection> directions,
                const VectorXf& class_embedding, const ModelSpec& spec, int k, float threshold) {
    const auto selected = select_neurons_by_direction(directions, class_embedding, k);
    return heatmap_from_neurons(trace, selected, spec, threshold);
}

double average_precision(std::span<const float> scores, std::span<const std::uint8_t> labels) {
    if (scores.size() != labels.size()) throw ValidationError("average_precision: size mismatch");
    const auto positives = std::count_if(labels.begin(), labels.end(), [](std::uint8_t l) { return l != 0; });
    if (positives == 0) return std::nan("");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    double ap = 0.0, prev_recall = 0.0;
    std::size_t tp = 0, seen = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            tp += labels[order[j]] != 0;
            ++j;
        }
        seen = j;
        const double recall = static_cast<double>(tp) / static_cast<double>(positives);
        const double precision = static_cast<double>(tp) / static_cast<double>(seen);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    return ap;
}

SegmentationMetrics segmentation_metrics(std::span<const Heatmap> predicted, std::span<const BinaryMask> truth) {
    if (predicted.empty()) throw ValidationError("segmentation_metrics: no images");
    if (predicted.size() != truth.size()) throw ValidationError("segmentation_metrics: prediction/truth count mismatch");
    SegmentationMetrics m;
    std::size_t correct = 0, total = 0, ap_count = 0;
    double iou_sum = 0.0, ap_sum = 0.0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        const auto& p = predicted[i];
        const auto& g = truth[i];
        if (g.height != p.size || g.width != p.size || g.data.size() != p.mask.size() || p.upsampled.size() != p.mask.size())
            throw ValidationError("segmentation_metrics: shape mismatch for image " + std::to_string(i));
        std::size_t inter_fg = 0, union_fg = 0, inter_bg = 0, union_bg = 0;
        for (std::size_t k = 0; k < g.data.size(); ++k) {
            const bool pf = p.mask[k] != 0, gf = g.data[k] != 0;
            correct += pf == gf;
            inter_fg += pf && gf;
            union_fg += pf || gf;
            inter_bg += !pf && !gf;
            union_bg += !pf || !gf;
        }
        total += g.data.size();
        const double iou_fg = union_fg ? static_cast<double>(inter_fg) / static_cast<double>(union_fg) : 1.0;
        const double iou_bg = union_bg ? static_cast<double>(inter_bg) / static_cast<double>(union_bg) : 1.0;
        iou_sum += 0.5 * (iou_fg + iou_bg);
        const double ap = average_precision(p.upsampled, g.data);
        if (std::isnan(ap)) {
            ++m.images_without_foreground;
        } else {
            ap_sum += ap;
            ++ap_count;
        }
    }
    m.pixel_accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(total);
    m.miou = 100.0 * iou_sum / static_cast<double>(predicted.size());
    m.map = ap_count ? 100.0 * ap_sum / static_cast<double>(ap_count) : 0.0;
    return m;
}

}  // namespace solens
