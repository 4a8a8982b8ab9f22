#pragma once

#include <vector>

#include "momo/rng.hpp"
#include "momo/tensor.hpp"

namespace momo {

// Visible/masked index bookkeeping for one sequence. Indices are over
// content tokens only; [CLS] is handled by the model and is never masked.
struct MaskPlan {
    int seq_len = 0;
    double ratio = 0.0;
    std::vector<int> masked_idx;   // sorted
    std::vector<int> visible_idx;  // sorted complement
    // restore_perm[original_pos] = row in (visible ++ masked) concat order
    std::vector<int> restore_perm;

    int n_masked() const { return static_cast<int>(masked_idx.size()); }
    int n_visible() const { return static_cast<int>(visible_idx.size()); }
};

struct JointMaskPlan {
    MaskPlan image;
    MaskPlan text;
};

inline int masked_count(int seq_len, double ratio) {
    int count = static_cast<int>(std::llround(static_cast<double>(seq_len) * ratio));
    if (count < 1) count = 1;
    if (count > seq_len - 1) count = seq_len - 1;
    return count;
}

// Build a plan from an explicit masked set (tests inject these).
inline MaskPlan plan_from_masked_set(int seq_len, std::vector<int> masked, double ratio = 0.0) {
    MaskPlan plan;
    plan.seq_len = seq_len;
    plan.ratio = ratio;
    std::sort(masked.begin(), masked.end());
    plan.masked_idx = std::move(masked);
    std::vector<char> is_masked(static_cast<size_t>(seq_len), 0);
    for (int m : plan.masked_idx) {
        MOMO_CHECK(m >= 0 && m < seq_len, "masked index " << m << " out of range [0," << seq_len << ")");
        is_masked[static_cast<size_t>(m)] = 1;
    }
    for (int i = 0; i < seq_len; ++i)
        if (!is_masked[static_cast<size_t>(i)]) plan.visible_idx.push_back(i);
    plan.restore_perm.assign(static_cast<size_t>(seq_len), -1);
    for (size_t v = 0; v < plan.visible_idx.size(); ++v)
        plan.restore_perm[static_cast<size_t>(plan.visible_idx[v])] = static_cast<int>(v);
    for (size_t m = 0; m < plan.masked_idx.size(); ++m)
        plan.restore_perm[static_cast<size_t>(plan.masked_idx[m])] =
            static_cast<int>(plan.visible_idx.size() + m);
    return plan;
}

// Uniform sample (without replacement) of round(L*ratio) masked positions,
// clamped to [1, L-1] so both the visible and masked sets are nonempty.
inline MaskPlan sample_mask(int seq_len, double ratio, Rng& rng) {
    MOMO_CHECK(seq_len >= 2, "sample_mask needs seq_len >= 2, got " << seq_len);
    MOMO_CHECK(ratio > 0.0 && ratio < 1.0, "sample_mask needs ratio in (0,1), got " << ratio);
    const int count = masked_count(seq_len, ratio);
    std::vector<int> perm = rng.permutation(seq_len);
    perm.resize(static_cast<size_t>(count));
    return plan_from_masked_set(seq_len, std::move(perm), ratio);
}

inline JointMaskPlan joint_plan(int img_len, int txt_len, double r_img, double r_txt, Rng& rng) {
    JointMaskPlan jp;
    jp.image = sample_mask(img_len, r_img, rng);
    jp.text = sample_mask(txt_len, r_txt, rng);
    return jp;
}

// Rows of seq at the plan's visible positions, original relative order.
template <class T>
Tensor<T> gather_visible(Tape<T>& tape, const Tensor<T>& seq, const MaskPlan& plan) {
    MOMO_CHECK(seq.rank() == 2 && seq.dim(0) == plan.seq_len,
               "gather_visible: sequence " << shape_str(seq.shape()) << " does not match plan length "
                                           << plan.seq_len);
    return gather_rows(tape, seq, plan.visible_idx);
}

// Rebuild the full-length sequence: visible rows return to their original
// positions, masked positions receive mask_vec. Decoder positional
// embeddings are added by the model afterwards.
template <class T>
Tensor<T> restore_full(Tape<T>& tape, const Tensor<T>& encoded_visible, const MaskPlan& plan,
                       const Tensor<T>& mask_vec) {
    MOMO_CHECK(encoded_visible.rank() == 2 && encoded_visible.dim(0) == plan.n_visible(),
               "restore_full: got " << encoded_visible.dim(0) << " rows, plan has " << plan.n_visible()
                                    << " visible");
    MOMO_CHECK(mask_vec.rank() == 1 && mask_vec.dim(0) == encoded_visible.dim(1),
               "restore_full: mask vector width mismatch");
    Tensor<T> mask_rows = repeat_row(tape, mask_vec, plan.n_masked());
    Tensor<T> stacked = concat_rows(tape, {encoded_visible, mask_rows});
    return gather_rows(tape, stacked, plan.restore_perm);
}

}  // namespace momo
