#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "pfm/model.hpp"

namespace pfm {

struct CostRow {
    std::string path;
    i64 params = 0;
    i64 macs = 0;
};

/// Exact per-module parameter and MAC breakdown; row sums equal the totals.
struct CostReport {
    i64 total_params = 0;
    i64 total_macs = 0;
    std::vector<CostRow> rows;
};

/// Counts every learnable buffer (weights, biases, norm affine, positional
/// embeddings). Batch-norm running statistics are not learnable and are
/// excluded.
template <typename T>
i64 count_params(Patternformer<T>& model) {
    i64 n = 0;
    for (auto& [path, p] : model.named_parameters()) n += p->value.size();
    return n;
}

namespace detail {

template <typename T>
i64 params_with_prefix(Patternformer<T>& model, const std::string& prefix) {
    i64 n = 0;
    for (auto& [path, p] : model.named_parameters()) {
        if (path.rfind(prefix, 0) == 0) n += p->value.size();
    }
    return n;
}

}  // namespace detail

/// Per-sample costs at the model's build resolution. One multiply-add is one
/// MAC; conv = Cout*Cin*k^2*Hout*Wout, linear = in*out*positions, attention =
/// qkv/out projections + 2*T^2*D per block. Norms, activations, pooling and
/// bias adds are not counted.
template <typename T>
CostReport cost_report(Patternformer<T>& model) {
    CostReport r;
    auto add_row = [&r](std::string path, i64 params, i64 macs) {
        r.rows.push_back({std::move(path), params, macs});
        r.total_params += params;
        r.total_macs += macs;
    };
    std::array<i64, 5> stage_macs{};
    model.tokenizer.macs(model.config.resolution, &stage_macs);
    add_row("tokenizer.stem", detail::params_with_prefix(model, "tokenizer.stem"), stage_macs[0]);
    for (int s = 1; s <= 4; ++s) {
        const std::string p = "tokenizer.stage" + std::to_string(s);
        add_row(p, detail::params_with_prefix(model, p), stage_macs[s]);
    }
    add_row("graft", model.graft.param_count(), model.graft.macs());
    if (model.use_pos_embed) add_row("pos_embed", model.pos_embed.value.size(), 0);
    for (std::size_t b = 0; b < model.blocks.size(); ++b) {
        add_row("encoder.block" + std::to_string(b), model.blocks[b].param_count(),
                model.blocks[b].macs(model.config.tokens));
    }
    add_row("norm", model.final_norm.param_count(), 0);
    add_row("head", model.head.param_count(), model.head.macs(1));
    return r;
}

template <typename T>
i64 count_macs(Patternformer<T>& model) {
    return cost_report(model).total_macs;
}

// ---------------------------------------------------------------------------
// model-family table reconstruction
// ---------------------------------------------------------------------------

struct PaperTarget {
    const char* name;
    double params;  // reported parameter count
    double macs;    // reported GFLOPs column, read under the MAC convention
    double params_band;
    bool flagged;  // reported value could not be reconciled with any
                   // width-scaling rule; see the audit header note
};

inline const std::vector<PaperTarget>& paper_targets() {
    static const std::vector<PaperTarget> kTargets = {
        {"Res34-ViT_S", 42.8e6, 6.6e9, 0.02, false},
        {"Res34-ViT_B", 106.6e6, 15.0e9, 0.02, false},
        {"Res50-ViT_S", 45.2e6, 7.0e9, 0.02, false},
        {"Res50-ViT_B", 109.0e6, 15.4e9, 0.02, false},
        {"Efficient-T", 11.9e6, 1.6e9, 0.35, true},
        {"Efficient-S", 29.8e6, 3.5e9, 0.02, false},
        {"Efficient-B", 56.7e6, 6.3e9, 0.35, true},
    };
    return kTargets;
}

struct AuditRow {
    std::string name;
    i64 params = 0;
    i64 macs = 0;
    double paper_params = 0;
    double paper_macs = 0;
    double rel_err_params = 0;
    double rel_err_macs = 0;
    double params_band = 0;
    double macs_band = 0.10;
    bool flagged = false;
    bool gated = false;  // Res* rows decide the audit exit status
    bool params_ok = false;
    bool macs_ok = false;
    CostReport breakdown;
};

struct AuditTable {
    std::vector<AuditRow> rows;
    int classes = 1000;
    int resolution = 224;
    bool gate_ok = true;  // all Res* rows within +-2% params and +-10% MACs
};

inline AuditTable audit_table1(int classes = 1000, int resolution = 224) {
    AuditTable table;
    table.classes = classes;
    table.resolution = resolution;
    for (const auto& target : paper_targets()) {
        ModelConfig cfg = preset(target.name);
        cfg.resolution = resolution;
        auto model = assemble_model<float>(cfg, classes, 0, /*init=*/false);
        AuditRow row;
        row.name = target.name;
        row.breakdown = cost_report(*model);
        row.params = row.breakdown.total_params;
        row.macs = row.breakdown.total_macs;
        row.paper_params = target.params;
        row.paper_macs = target.macs;
        row.rel_err_params = std::fabs(row.params - target.params) / target.params;
        row.rel_err_macs = std::fabs(row.macs - target.macs) / target.macs;
        row.params_band = target.params_band;
        row.macs_band = target.flagged ? 0.35 : 0.10;
        row.flagged = target.flagged;
        row.gated = row.name.rfind("Res", 0) == 0;
        row.params_ok = row.rel_err_params <= row.params_band;
        row.macs_ok = row.rel_err_macs <= row.macs_band;
        if (row.gated && (!row.params_ok || !row.macs_ok)) table.gate_ok = false;
        table.rows.push_back(std::move(row));
    }
    return table;
}

inline std::string format_audit_text(const AuditTable& t, bool with_breakdown = false) {
    std::string out;
    char line[256];
    out += "# model family cost audit (classes=" + std::to_string(t.classes) +
           ", resolution=" + std::to_string(t.resolution) + ")\n";
    out += "# cost unit: 1 MAC = 1 multiply-add; the reported GFLOPs column matches\n";
    out += "# this convention (ResNet34 ~3.6G + scaled ViT-S ~3.0G ~= 6.6G)\n";
    out += "# flag '!': reported value not reconcilable with the width-scaling rule;\n";
    out += "#           relaxed +-35% band applies to these rows\n";
    std::snprintf(line, sizeof(line), "%-14s %14s %14s %12s %10s %9s %9s  %s\n", "model", "params",
                  "macs", "paper_params", "paper_macs", "err_par", "err_mac", "status");
    out += line;
    for (const auto& r : t.rows) {
        const bool ok = r.params_ok && r.macs_ok;
        std::snprintf(line, sizeof(line), "%-14s %14lld %14lld %12.1fM %9.1fG %8.2f%% %8.2f%%  %s%s\n",
                      r.name.c_str(), static_cast<long long>(r.params),
                      static_cast<long long>(r.macs), r.paper_params / 1e6, r.paper_macs / 1e9,
                      100.0 * r.rel_err_params, 100.0 * r.rel_err_macs,
                      ok ? "ok" : "OUT-OF-BAND", r.flagged ? " !" : "");
        out += line;
        if (with_breakdown) {
            for (const auto& row : r.breakdown.rows) {
                std::snprintf(line, sizeof(line), "    %-28s %14lld %14lld\n", row.path.c_str(),
                              static_cast<long long>(row.params), static_cast<long long>(row.macs));
                out += line;
            }
        }
    }
    out += t.gate_ok ? "gate: PASS (all Res* rows in band)\n"
                     : "gate: FAIL (a Res* row is out of band)\n";
    return out;
}

inline std::string format_audit_csv(const AuditTable& t) {
    std::string out = "name,params,macs,paper_params,paper_macs,rel_err_params,rel_err_macs\n";
    char line[256];
    for (const auto& r : t.rows) {
        std::snprintf(line, sizeof(line), "%s,%lld,%lld,%.0f,%.0f,%.6f,%.6f\n", r.name.c_str(),
                      static_cast<long long>(r.params), static_cast<long long>(r.macs),
                      r.paper_params, r.paper_macs, r.rel_err_params, r.rel_err_macs);
        out += line;
    }
    return out;
}

}  // namespace pfm
