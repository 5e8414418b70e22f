"""Bag-of-words ceiling of each synthetic task for a few difficulty settings.

A logistic regression on word counts, trained on each task's training pool in
isolation, bounds what a sequential learner can reach on that task.

    python scripts/calibrate_synthetic.py
"""

from sklearn.feature_extraction.text import CountVectorizer
from sklearn.linear_model import LogisticRegression

from idbr.corpus import load_dataset
from idbr.synthetic import SyntheticConfig, synthetic_registry

SETTINGS = [(0.25, 0.3), (0.4, 0.2), (0.5, 0.2), (0.4, 0.25)]


def ceiling(cfg, seed=0):
    accs = []
    for entry in synthetic_registry(cfg, seed):
        train, test = load_dataset(entry.train_source), load_dataset(entry.test_source)
        vec = CountVectorizer(token_pattern=r"\S+")
        x = vec.fit_transform([e.text for e in train.examples])
        clf = LogisticRegression(max_iter=2000).fit(x, [e.label for e in train.examples])
        accs.append(clf.score(vec.transform([e.text for e in test.examples]),
                              [e.label for e in test.examples]))
    return accs


if __name__ == "__main__":
    for cue_rate, confusion in SETTINGS:
        accs = ceiling(SyntheticConfig(cue_rate=cue_rate, confusion=confusion))
        print(f"cue_rate={cue_rate} confusion={confusion}: " + " ".join(f"{a:.3f}" for a in accs))
