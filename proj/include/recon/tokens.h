// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace recon {

// Row-major [rows x cols] matrix of token ids; one row per sequence.
struct TokenMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<int> ids;

    TokenMatrix() = default;
    TokenMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), ids(r * c, 0) {}

    std::span<const int> row(std::size_t r) const { return {ids.data() + r * cols, cols}; }
    std::span<int> row(std::size_t r) { return {ids.data() + r * cols, cols}; }

    // Rows [begin, end) as a new matrix.
    TokenMatrix slice_rows(std::size_t begin, std::size_t end) const {
        TokenMatrix out(end - begin, cols);
        for (std::size_t i = 0; i < out.ids.size(); ++i) {
            out.ids[i] = ids[begin * cols + i];
        }
        return out;
    }

    // Rows picked in the given order.
    TokenMatrix gather_rows(std::span<const std::size_t> which) const {
        TokenMatrix out(which.size(), cols);
        for (std::size_t r = 0; r < which.size(); ++r) {
            for (std::size_t c = 0; c < cols; ++c) {
                out.ids[r * cols + c] = ids[which[r] * cols + c];
            }
        }
        return out;
    }

    bool operator==(const TokenMatrix &) const = default;
};

}  // namespace recon
