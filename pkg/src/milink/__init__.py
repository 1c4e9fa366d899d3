"""milink: entity linking learned from unlabeled text.

Candidates are surface-matched against a knowledge base, a neural scorer
is trained on the resulting noisy candidate sets with a max-margin
multi-instance objective, and a jointly trained noise detector
down-weights untrustworthy training points and can abstain at test time.
"""

from .kb import Entity, KnowledgeBase, RelationTriple, load_kb, load_kb_files, match_by_name, related
from .candidates import (
    DataPoint,
    Mention,
    Sentence,
    build_dataset,
    generate_positive_set,
    oracle_recall,
    sample_negatives,
    select_training_sentences,
)
from .model import (
    EncodedContext,
    EntityTypeTable,
    LinkingModel,
    ModelConfig,
    WordVectors,
    attend_positive,
    embed_entity,
    encode_context,
    forward_batch,
    noise_prob,
    score,
)
from .training import TrainState, hinge_loss, kl_bernoulli, loss_l1, loss_l2, train
from .evaluation import (
    EvalReport,
    Prediction,
    evaluate,
    link,
    link_batch,
    link_by_prominence,
    link_with_abstain,
    nd_accuracy_curve,
    per_type_errors,
)
from .synth import SynthConfig, generate_corpus, generate_kb, generate_splits

__version__ = "0.1.0"
