//! Python guest sources. Guests use only the standard library and read the
//! public task files from `../input/`.

pub const IMPORTS: &str = "import csv\nimport math";

pub const LOAD: &str = r#"with open("../input/train.csv") as f:
    train_rows = list(csv.DictReader(f))
with open("../input/test.csv") as f:
    test_rows = list(csv.DictReader(f))

features = [k for k in train_rows[0] if k.startswith("x")]
X = [[float(r[k]) for k in features] for r in train_rows]
y = [float(r["y"]) for r in train_rows]
X_test = [[float(r[k]) for k in features] for r in test_rows]"#;

pub const MODEL_CODE: &str = r#"def solve(a, b):
    n = len(b)
    m = [row[:] + [v] for row, v in zip(a, b)]
    for col in range(n):
        piv = max(range(col, n), key=lambda r: abs(m[r][col]))
        m[col], m[piv] = m[piv], m[col]
        if abs(m[col][col]) < 1e-12:
            raise ValueError("singular system")
        for r in range(n):
            if r != col:
                f = m[r][col] / m[col][col]
                for c in range(col, n + 1):
                    m[r][c] -= f * m[col][c]
    return [m[i][n] / m[i][i] for i in range(n)]


class LeastSquaresModel:
    def __init__(self, ridge=0.0):
        if ridge < 0:
            raise ValueError("ridge must be non-negative")
        self.ridge = ridge
        self.coef = []

    def fit(self, X, y):
        if len(X) != len(y):
            raise ValueError("X and y differ in length")
        rows = [[1.0] + list(x) for x in X]
        d = len(rows[0])
        a = [[sum(r[i] * r[j] for r in rows) for j in range(d)] for i in range(d)]
        for i in range(1, d):
            a[i][i] += self.ridge * len(rows)
        b = [sum(r[i] * t for r, t in zip(rows, y)) for i in range(d)]
        self.coef = solve(a, b)
        return self

    def score(self, x):
        return self.coef[0] + sum(c * v for c, v in zip(self.coef[1:], x))

    def predict(self, X):
        return [self.score(x) for x in X]

    def mse(self, X, y):
        return sum((self.score(x) - t) ** 2 for x, t in zip(X, y)) / len(y)"#;

pub fn construct(ridge: f64) -> String {
    format!("model = LeastSquaresModel(ridge={ridge:?})")
}

pub const FIT: &str = "model.fit(X, y)\ntrain_loss = model.mse(X, y)";

pub const PREDICT: &str = "preds = model.predict(X_test)";

pub fn write_submission(file: &str) -> String {
    format!(
        r#"with open("{file}", "w") as f:
    f.write("id,y\n")
    for r, p in zip(test_rows, preds):
        f.write(r["id"] + "," + repr(p) + "\n")"#
    )
}

/// Keeps the listed feature columns only; an empty list leaves the
/// intercept, i.e. the training-mean predictor.
pub fn select_columns(cols: &[usize]) -> String {
    let list = cols
        .iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(", ");
    format!("cols = [{list}]\nX = [[x[c] for c in cols] for x in X]\nX_test = [[x[c] for c in cols] for x in X_test]")
}

/// Complete tabular program: least squares on `cols` (all when `None`).
pub fn least_squares_program(cols: Option<&[usize]>, ridge: f64) -> String {
    let mut parts = vec![IMPORTS.to_string(), LOAD.to_string()];
    if let Some(c) = cols {
        parts.push(select_columns(c));
    }
    parts.extend([
        MODEL_CODE.to_string(),
        construct(ridge),
        FIT.to_string(),
        PREDICT.to_string(),
        write_submission("submission.csv"),
    ]);
    parts.join("\n\n") + "\n"
}

/// Sleeps, then writes fixed labels for the listed test ids.
pub fn bandit_program(sleep_s: f64, labels: &str) -> String {
    format!(
        r#"import time

time.sleep({sleep_s:?})
labels = "{labels}"
with open("../input/test.csv") as f:
    ids = [line.strip() for line in f][1:]
with open("submission.csv", "w") as f:
    f.write("id,y\n")
    for i, c in zip(ids, labels):
        f.write(i + "," + c + "\n")
"#
    )
}
