#pragma once

#include "civkit/basis.hpp"
#include "civkit/dataset.hpp"
#include "civkit/design.hpp"
#include "civkit/errors.hpp"
#include "civkit/f_test.hpp"
#include "civkit/gmm.hpp"
#include "civkit/instrument.hpp"
#include "civkit/me_variance.hpp"
#include "civkit/mediation.hpp"
#include "civkit/nuisance.hpp"
#include "civkit/outcome.hpp"
#include "civkit/report.hpp"
#include "civkit/rng.hpp"
#include "civkit/simulation.hpp"
#include "civkit/util.hpp"
#include "civkit/version.hpp"
