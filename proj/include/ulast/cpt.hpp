#pragma once

// Template propagation: attention retrieval of the next template kernel from
// a masked search feature, queried by the initial template (long-term) and
// a recurrent hidden template (short-term).

#include "ulast/net.hpp"
#include "ulast/tensor.hpp"

namespace ulast {

enum class CptTerms { LongShort, LongOnly, ShortOnly };
// Which axis of the [N_template x N_search] affinity is normalised.
enum class AttentionAxis { Search, Template };

struct CptOptions {
  CptTerms terms = CptTerms::LongShort;
  bool residual = false;
  AttentionAxis axis = AttentionAxis::Search;
};

enum class Query { Long, Short };

// S [C x H x W] * M [H x W].
Var mask_search(Var search_feat, Var mask);

struct Retrieval {
  Var features;   // [C x h x w]
  Var attention;  // [h*w x H*W]
};

Retrieval retrieve(const Bound& net, Var masked_search, Var query_source, Query which,
                   AttentionAxis axis = AttentionAxis::Search);

// f_phi(concat(x_long, t1)).
Var update_hidden(const Bound& net, Var x_long, Var t1);

struct CptOutput {
  Var kernel;  // T_t
  Var hidden;  // H_t
  Retrieval long_term;
  Retrieval short_term;
};

CptOutput cpt_forward(const Bound& net, Var search_feat, Var mask, Var t1, Var hidden_prev,
                      const CptOptions& opts = {});

}  // namespace ulast
