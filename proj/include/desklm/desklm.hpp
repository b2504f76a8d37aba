// Umbrella header: pulls in the whole library.
#pragma once

#include <desklm/arpa.hpp>
#include <desklm/backprop.hpp>
#include <desklm/compress.hpp>
#include <desklm/corpus.hpp>
#include <desklm/corpusgen.hpp>
#include <desklm/dedup.hpp>
#include <desklm/eval.hpp>
#include <desklm/filter.hpp>
#include <desklm/mat.hpp>
#include <desklm/nce.hpp>
#include <desklm/ngram.hpp>
#include <desklm/rmsprop.hpp>
#include <desklm/rng.hpp>
#include <desklm/rnn.hpp>
#include <desklm/trainer.hpp>
#include <desklm/util.hpp>
