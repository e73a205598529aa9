use std::process::Command;

use mlerl::instrument::{
    instrument_or_passthrough, strip_markers, MarkerProtocol, PatternInserter,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const IMPORTS: &[&str] = &[
    "import csv",
    "import math, random",
    "from collections import Counter",
    "import json as js",
];
const READS: &[&str] = &[
    "rows = list(csv.DictReader(open(\"../input/train.csv\")))",
    "with open(\"../input/train.csv\") as f:\n    rows = list(csv.DictReader(f))",
    "data = open(\"../input/test.csv\").read().split(\"\\n\")",
];
const MODELS: &[&str] = &[
    "class Model:\n    def fit(self, X, y):\n        self.m = sum(y) / len(y)\n        return self\n\n    def predict(self, X):\n        return [self.m for _ in X]",
    "def build():\n    return {\"w\": 0.0}\nmodel = build()",
    "model = Model()",
];
const FITS: &[&str] = &[
    "model.fit([[1]], [2.0])",
    "for epoch in range(3):\n    model.fit([[1]], [float(epoch)])",
    "model = model.fit([[1], [2]], [1.0, 3.0])",
];
const LOSSES: &[&str] = &[
    "train_loss = (2.0 - 1.5) ** 2",
    "val_loss = abs(\n    1.0 - 0.5\n)",
    "loss = 0.25  # training objective",
];
const PREDICTS: &[&str] = &["preds = model.predict([[1], [2]])", "preds = [0.5, 0.5]"];
const WRITES: &[&str] = &[
    "with open(\"submission.csv\", \"w\") as f:\n    f.write(\"id,y\\n\")",
    "open(\"submission.csv\", \"w\").write(\"id,y\\n0,1\\n\")",
];
const NOISE: &[&str] = &[
    "# comment mentioning fit and predict",
    "s = \"model.fit(x) inside a string\"",
    "x = [\n    1,\n    2,\n]",
    "",
    "if True:\n    pass",
    "doc = \"\"\"\nloaded data\nimport nothing\n\"\"\"",
];

fn program(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: Vec<&str> = Vec::new();
    for group in [IMPORTS, READS, MODELS, FITS, LOSSES, PREDICTS, WRITES] {
        if rng.gen_bool(0.8) {
            parts.push(group.choose(&mut rng).unwrap());
        }
        if rng.gen_bool(0.3) {
            parts.push(NOISE.choose(&mut rng).unwrap());
        }
    }
    let mut code = parts.join("\n");
    if rng.gen_bool(0.5) {
        code.push('\n');
    }
    code
}

fn corpus() -> Vec<String> {
    (0..100).map(program).collect()
}

#[test]
fn strip_reproduces_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (i, code) in corpus().iter().enumerate() {
        for protocol in [MarkerProtocol::plain(), MarkerProtocol::nonce(rng.gen())] {
            let out = instrument_or_passthrough(&PatternInserter, code, &protocol);
            assert!(out.fallback.is_none(), "program {i}: {:?}", out.fallback);
            assert_eq!(&strip_markers(&out.code, &protocol), code, "program {i}");
        }
    }
}

#[test]
fn instrumenting_twice_adds_nothing() {
    let protocol = MarkerProtocol::nonce(42);
    for (i, code) in corpus().iter().enumerate() {
        let once = PatternInserter::apply(code, &protocol);
        let twice = PatternInserter::apply(&once, &protocol);
        assert_eq!(once, twice, "program {i}");
    }
}

#[test]
fn instrumented_programs_compile() {
    let dir = tempfile::tempdir().unwrap();
    let protocol = MarkerProtocol::nonce(7);
    let mut paths = Vec::new();
    for (i, code) in corpus().iter().enumerate() {
        let p = dir.path().join(format!("p{i:03}.py"));
        std::fs::write(&p, PatternInserter::apply(code, &protocol)).unwrap();
        paths.push(p);
    }
    let script = "import sys\nbad = []\nfor p in sys.argv[1:]:\n    try:\n        compile(open(p).read(), p, 'exec')\n    except SyntaxError as e:\n        bad.append(p + ': ' + str(e))\nprint('\\n'.join(bad))\nsys.exit(1 if bad else 0)\n";
    let out = Command::new("python3")
        .args(["-I", "-S", "-c", script])
        .args(&paths)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
}
