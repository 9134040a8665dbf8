// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "macl/autograd.hpp"

namespace macl {

// The six tensors of one asymmetric forward pass over 2N rows.
template <typename T>
struct BranchOutputs {
    Var<T> Y;       // dominant encoder feature, e(down(I))
    Var<T> Yt;      // auxiliary encoder feature, e(I)
    Var<T> Zg;      // dominant image projection, [2N, C]
    Var<T> Zg_aux;  // auxiliary image projection, [2N, C]
    Var<T> Zl;      // dominant pixel projection (partial decoder output), [2N, Cp, S, S]
    Var<T> Zl_aux;  // auxiliary pixel projection, [2N, Cp, S, S]
    double lambda = 1.0;

    bool has_global() const { return Zg.defined() && Zg_aux.defined(); }
    bool has_pixel() const { return Zl.defined() && Zl_aux.defined(); }
    bool has_features() const { return Y.defined() && Yt.defined(); }
};

} // namespace macl
