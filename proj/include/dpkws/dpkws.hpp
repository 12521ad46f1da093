#pragma once

#include "checkpoint.hpp"
#include "common.hpp"
#include "config.hpp"
#include "corpus.hpp"
#include "dataparams.hpp"
#include "eval.hpp"
#include "features.hpp"
#include "kws.hpp"
#include "netcore.hpp"
#include "pipeline.hpp"
#include "svg.hpp"
#include "trainer.hpp"
#include "wav.hpp"
