#pragma once

#include <string>
#include <vector>

#include "cdistill/error.hpp"

namespace cdistill {

/// A neuron set: full hidden vectors at one grid row and a set of token columns.
/// Rows 1..L are block outputs (row 0, the embedding output, is never a target).
/// Columns are 1-based token positions.
struct NeuronSelector {
  std::size_t row = 0;
  std::vector<std::size_t> cols;

  void validate(std::size_t num_layers, std::size_t seq_len) const {
    if (row == 0) throw InterventionError("neuron selector: row 0 (embeddings) cannot be intervened on");
    if (row > num_layers) {
      throw InterventionError("neuron selector: row " + std::to_string(row) + " outside 1.." + std::to_string(num_layers));
    }
    if (cols.empty()) throw InterventionError("neuron selector: empty column set");
    for (std::size_t i = 0; i < cols.size(); ++i) {
      if (cols[i] < 1 || cols[i] > seq_len) {
        throw InterventionError("neuron selector: column " + std::to_string(cols[i]) + " outside 1.." +
                                std::to_string(seq_len));
      }
      if (i > 0 && cols[i] <= cols[i - 1]) throw InterventionError("neuron selector: columns must be strictly increasing");
    }
  }

  /// Flat [batch*seq] row indices of the selected cells, sequence-major.
  std::vector<std::size_t> flat_rows(std::size_t batch, std::size_t seq_len) const {
    std::vector<std::size_t> out;
    out.reserve(batch * cols.size());
    for (std::size_t b = 0; b < batch; ++b)
      for (auto c : cols) out.push_back(b * seq_len + (c - 1));
    return out;
  }

  friend bool operator==(const NeuronSelector&, const NeuronSelector&) = default;
};

}  // namespace cdistill
