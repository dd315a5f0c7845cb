// Generate a small GAP corpus, fine-tune a model on it and score held-out patients.

#include <iostream>

#include "chronoformer/chronoformer.hpp"

using namespace chronoformer;

int main() {
  GenConfig g;
  g.task = TaskFamily::gap;
  g.patients = 200;
  const auto train_set = generate_synthetic(g, 1);
  g.patients = 100;
  g.id_prefix = "t";
  const auto test_set = generate_synthetic(g, 2);

  ModelConfig mc;
  mc.vocab_size = train_set.vocab.size();
  auto params = init_params(mc);

  TrainConfig tc;
  tc.task = "gap";
  tc.steps = 300;
  tc.adam.lr = 1e-3;
  finetune(make_train_data(train_set.sequences, train_set.vocab, "gap"), params, mc, tc);

  std::vector<double> scores, labels;
  for (const auto& s : test_set.sequences) {
    scores.push_back(predict(make_input(s), params, mc, PredictTask::binary).front());
    labels.push_back(s.binary_label("gap"));
  }
  std::cout << "held-out AUROC " << auroc(scores, labels) << "\n";
}
