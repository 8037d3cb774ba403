#pragma once

#include "gfg/autodiff.hpp"
#include "gfg/distributions.hpp"
#include "gfg/dot.hpp"
#include "gfg/error.hpp"
#include "gfg/expr.hpp"
#include "gfg/factorize.hpp"
#include "gfg/graph.hpp"
#include "gfg/idioms.hpp"
#include "gfg/model.hpp"
#include "gfg/oracle.hpp"
#include "gfg/report.hpp"
#include "gfg/smp.hpp"
#include "gfg/svi.hpp"
#include "gfg/tensor.hpp"
#include "gfg/trace.hpp"
#include "gfg/variational.hpp"
