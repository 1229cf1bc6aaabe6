//! Minimal external solver for exercising the host side of the plugin
//! protocol: an affine model `y = W x + b` fitted by plain gradient steps.
//!
//! `--wrong-types` advertises an input type no problem produces, `--hang`
//! reads the greeting and never answers, `--fail-train` refuses to train,
//! `--out TYPE` changes the advertised output type.

use base64::Engine;
use serde_json::{json, Value as Json};
use std::io::{BufRead, Write};

#[derive(Default)]
struct Model {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    lr: f64,
    steps: usize,
}

impl Model {
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.w.iter().zip(&self.b).map(|(row, b)| b + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()).collect()
    }

    fn ensure(&mut self, d_in: usize, d_out: usize) {
        if self.w.len() != d_out || self.w.first().map_or(0, Vec::len) != d_in {
            self.w = vec![vec![0.0; d_in]; d_out];
            self.b = vec![0.0; d_out];
        }
    }

    /// Full-batch gradient steps on mean squared error; returns the loss before the last step.
    fn train(&mut self, x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
        let (Some(x0), Some(y0)) = (x.first(), y.first()) else { return 0.0 };
        self.ensure(x0.len(), y0.len());
        let n = x.len() as f64;
        let mut loss = 0.0;
        for _ in 0..self.steps.max(1) {
            loss = 0.0;
            let mut gw = vec![vec![0.0; x0.len()]; y0.len()];
            let mut gb = vec![0.0; y0.len()];
            for (xi, yi) in x.iter().zip(y) {
                let p = self.forward(xi);
                for o in 0..p.len() {
                    let e = p[o] - yi[o];
                    loss += e * e / (n * p.len() as f64);
                    gb[o] += 2.0 * e / n;
                    for (g, xv) in gw[o].iter_mut().zip(xi) {
                        *g += 2.0 * e * xv / n;
                    }
                }
            }
            for o in 0..gb.len() {
                self.b[o] -= self.lr * gb[o];
                for (w, g) in self.w[o].iter_mut().zip(&gw[o]) {
                    *w -= self.lr * g;
                }
            }
        }
        loss
    }
}

fn rows(v: &Json) -> Vec<Vec<f64>> {
    v.as_array()
        .map(|rs| rs.iter().map(|r| r.as_array().map_or(Vec::new(), |c| c.iter().filter_map(Json::as_f64).collect())).collect())
        .unwrap_or_default()
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let flag = |f: &str| args.iter().any(|a| a == f);
    let out_type = args.iter().position(|a| a == "--out").and_then(|i| args.get(i + 1)).map_or("Tensor[?]", String::as_str);
    let stdin = std::io::stdin();
    let mut out = std::io::stdout().lock();
    let mut m = Model { lr: 0.1, steps: 50, ..Model::default() };
    for line in stdin.lock().lines() {
        let Ok(line) = line else { break };
        let Ok(msg) = serde_json::from_str::<Json>(&line) else {
            let _ = writeln!(out, "{}", json!({"t": "fail", "reason": "unparseable message"}));
            let _ = out.flush();
            continue;
        };
        let reply = match msg["t"].as_str().unwrap_or("") {
            "hello" if flag("--hang") => loop {
                std::thread::sleep(std::time::Duration::from_secs(3600));
            },
            "hello" => {
                let input = if flag("--wrong-types") { "Image[?,?,?]" } else { "Tensor[?]" };
                json!({"t": "meta", "tasks": ["classify", "predict"], "in": input, "out": out_type, "grad": true})
            }
            "init" => {
                m.lr = msg["hp"]["lr"].as_f64().unwrap_or(0.1);
                m.steps = msg["hp"]["steps"].as_f64().unwrap_or(50.0) as usize;
                json!({"t": "ok"})
            }
            "train" if flag("--fail-train") => json!({"t": "fail", "reason": "training disabled"}),
            "train" => json!({"t": "loss", "v": m.train(&rows(&msg["x"]), &rows(&msg["y"]))}),
            "predict" => {
                let y: Vec<Vec<f64>> = rows(&msg["x"]).iter().map(|x| m.forward(x)).collect();
                json!({"t": "pred", "y": y})
            }
            "grad" => {
                let g: Vec<Vec<f64>> =
                    rows(&msg["x"]).iter().map(|x| m.w.first().cloned().unwrap_or_else(|| vec![0.0; x.len()])).collect();
                json!({"t": "grad", "g": g})
            }
            "save" => {
                let blob = serde_json::to_vec(&json!({"w": m.w, "b": m.b})).expect("state serializes");
                json!({"t": "state", "b64": base64::engine::general_purpose::STANDARD.encode(blob)})
            }
            "load" => {
                let decoded = msg["b64"]
                    .as_str()
                    .and_then(|s| base64::engine::general_purpose::STANDARD.decode(s).ok())
                    .and_then(|b| serde_json::from_slice::<Json>(&b).ok());
                match decoded {
                    Some(s) => {
                        m.w = rows(&s["w"]);
                        m.b = s["b"].as_array().map_or(Vec::new(), |b| b.iter().filter_map(Json::as_f64).collect());
                        json!({"t": "ok"})
                    }
                    None => json!({"t": "fail", "reason": "bad state blob"}),
                }
            }
            "bye" => break,
            other => json!({"t": "fail", "reason": format!("unsupported message `{other}`")}),
        };
        let _ = writeln!(out, "{reply}");
        let _ = out.flush();
    }
}
