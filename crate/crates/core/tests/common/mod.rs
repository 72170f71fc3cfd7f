//! Fixture corpus plumbing and adapters that run the library on oracle inputs.

#![allow(dead_code)]

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sketchkp::destyle::style_loss_tensor;
use sketchkp::domainadapt::{query_prototypes, transport_loss_tensor, QueryEmbeddings};
use sketchkp::encoder::{gaussian_pool, FeatureMap};
use sketchkp::locator::{decode_grid, encode_grid_target};
use sketchkp::matcher::{correlate, Prototype};

use crate::oracles::{self, Map, OracleCase};

pub mod gradients;

pub const OPS: [&str; 5] = ["gaussian_pool", "correlate", "grid_roundtrip", "transport", "style"];
pub const CASES_PER_OP: usize = 120;
pub const TOLERANCE: f64 = 1e-6;

pub fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/oracle_cases.json")
}

pub fn load_cases() -> Vec<OracleCase> {
    let text = std::fs::read_to_string(fixture_path()).expect("oracle fixture corpus present");
    serde_json::from_str(&text).expect("oracle fixture corpus parses")
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, r: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-r..r)).collect()
}

fn random_map(rng: &mut ChaCha8Rng) -> Map {
    let c = rng.random_range(1..5);
    let h = rng.random_range(1..6);
    let w = rng.random_range(1..6);
    Map {
        values: (0..c)
            .map(|_| (0..h).map(|_| uniform_vec(rng, w, 1.0)).collect())
            .collect(),
        stride: rng.random_range(2..9),
    }
}

fn random_point(rng: &mut ChaCha8Rng) -> [f64; 2] {
    [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]
}

/// Builds the corpus; every `expected` value comes from the oracles.
pub fn generate_cases(seed: u64) -> Vec<OracleCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    for _ in 0..CASES_PER_OP {
        let map = random_map(&mut rng);
        let u = random_point(&mut rng);
        let xi = rng.random_range(1.0..12.0);
        let expected = oracles::oracle_gaussian_pool(&map, u, xi);
        cases.push(case("gaussian_pool", json!({"map": map, "u": u, "xi": xi}), json!(expected)));
    }
    for _ in 0..CASES_PER_OP {
        let map = random_map(&mut rng);
        let mu = uniform_vec(&mut rng, map.channels(), 2.0);
        let expected = oracles::oracle_correlate(&map, &mu);
        cases.push(case("correlate", json!({"map": map, "mu": mu}), json!(expected)));
    }
    for _ in 0..CASES_PER_OP {
        let scale = [8usize, 12, 16][rng.random_range(0..3)];
        let u = random_point(&mut rng);
        let (label, offset, decoded) = oracles::oracle_grid_roundtrip(u, scale);
        cases.push(case(
            "grid_roundtrip",
            json!({"u": u, "scale": scale}),
            json!({"label": label, "offset": offset, "decoded": decoded}),
        ));
    }
    for _ in 0..CASES_PER_OP {
        let n = rng.random_range(1..5);
        let c = rng.random_range(1..5);
        let mu: Vec<Vec<f64>> = (0..n).map(|_| uniform_vec(&mut rng, c, 0.6)).collect();
        let visible: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
        let queries: Vec<Vec<Vec<f64>>> = (0..n)
            .map(|_| {
                let m = rng.random_range(0..4);
                (0..m).map(|_| uniform_vec(&mut rng, c, 0.6)).collect()
            })
            .collect();
        let expected = oracles::oracle_transport(&mu, &visible, &queries);
        cases.push(case(
            "transport",
            json!({"mu": mu, "visible": visible, "queries": queries}),
            json!(expected),
        ));
    }
    for _ in 0..CASES_PER_OP {
        let n = rng.random_range(1..6);
        let c = rng.random_range(1..6);
        let mut draw = || -> Vec<Vec<f64>> { (0..n).map(|_| uniform_vec(&mut rng, c, 1.0)).collect() };
        let (s, s1, s2) = (draw(), draw(), draw());
        let visible: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        let expected = oracles::oracle_style(&s, &s1, &s2, &visible);
        cases.push(case(
            "style",
            json!({"s": s, "s1": s1, "s2": s2, "visible": visible}),
            json!(expected),
        ));
    }
    cases
}

fn case(op: &str, inputs: serde_json::Value, expected: serde_json::Value) -> OracleCase {
    OracleCase {
        op_name: op.to_string(),
        inputs,
        expected,
        tolerance: TOLERANCE,
    }
}

fn field<T: serde::de::DeserializeOwned>(v: &serde_json::Value, key: &str) -> T {
    serde_json::from_value(v[key].clone()).unwrap_or_else(|e| panic!("bad fixture field `{key}`: {e}"))
}

fn flatten(v: &serde_json::Value) -> Vec<f64> {
    match v {
        serde_json::Value::Array(items) => items.iter().flat_map(flatten).collect(),
        serde_json::Value::Number(n) => vec![n.as_f64().unwrap()],
        serde_json::Value::Object(map) => map.values().flat_map(flatten).collect(),
        other => panic!("unexpected fixture value {other}"),
    }
}

fn map_tensor(map: &Map) -> FeatureMap {
    let (c, h, w) = (map.channels(), map.height(), map.width());
    let flat: Vec<f64> = map.values.iter().flatten().flatten().copied().collect();
    FeatureMap::new(Tensor::from_vec(flat, (c, h, w), &Device::Cpu).unwrap(), map.stride).unwrap()
}

fn rows(v: &[Vec<f64>]) -> Tensor {
    let c = v.first().map_or(0, |r| r.len());
    Tensor::from_vec(v.iter().flatten().copied().collect::<Vec<_>>(), (v.len(), c), &Device::Cpu).unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Library output for one case, flattened in the same order as `expected`.
pub fn run_main(case: &OracleCase) -> Vec<f64> {
    let i = &case.inputs;
    match case.op_name.as_str() {
        "gaussian_pool" => {
            let map: Map = field(i, "map");
            let u: [f64; 2] = field(i, "u");
            let xi: f64 = field(i, "xi");
            gaussian_pool(&map_tensor(&map), u, xi).unwrap().to_vec().unwrap()
        }
        "correlate" => {
            let map: Map = field(i, "map");
            let mu: Vec<f64> = field(i, "mu");
            let proto = Prototype {
                values: Tensor::new(mu.as_slice(), &Device::Cpu).unwrap(),
                visible: true,
            };
            let a = correlate(&map_tensor(&map), &proto).unwrap();
            a.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        }
        "grid_roundtrip" => {
            let u: [f64; 2] = field(i, "u");
            let scale: usize = field(i, "scale");
            let t = encode_grid_target(u, scale).unwrap();
            let back = decode_grid(t.label, t.offset, scale).unwrap();
            // serde_json objects iterate keys sorted: decoded, label, offset.
            vec![back[0], back[1], t.label as f64, t.offset[0], t.offset[1]]
        }
        "transport" => {
            let mu: Vec<Vec<f64>> = field(i, "mu");
            let visible: Vec<bool> = field(i, "visible");
            let queries: Vec<Vec<Vec<f64>>> = field(i, "queries");
            let c = mu[0].len();
            let mut flat = Vec::new();
            let mut tags = Vec::new();
            for (n, qs) in queries.iter().enumerate() {
                for q in qs {
                    flat.push(q.clone());
                    tags.push(n);
                }
            }
            let values = if flat.is_empty() {
                Tensor::zeros((0, c), DType::F64, &Device::Cpu).unwrap()
            } else {
                rows(&flat)
            };
            let q = QueryEmbeddings { values: &values, keypoint: &tags };
            let (means, _) = query_prototypes(&q, mu.len()).unwrap();
            vec![scalar(&transport_loss_tensor(&rows(&mu), &visible, &q, &means).unwrap())]
        }
        "style" => {
            let s: Vec<Vec<f64>> = field(i, "s");
            let s1: Vec<Vec<f64>> = field(i, "s1");
            let s2: Vec<Vec<f64>> = field(i, "s2");
            let visible: Vec<bool> = field(i, "visible");
            vec![scalar(&style_loss_tensor([&rows(&s), &rows(&s1), &rows(&s2)], &visible).unwrap())]
        }
        other => panic!("unknown oracle op `{other}`"),
    }
}

/// Oracle output recomputed from the stored inputs.
pub fn run_oracle(case: &OracleCase) -> Vec<f64> {
    let i = &case.inputs;
    let v = match case.op_name.as_str() {
        "gaussian_pool" => json!(oracles::oracle_gaussian_pool(&field(i, "map"), field(i, "u"), field(i, "xi"))),
        "correlate" => json!(oracles::oracle_correlate(&field(i, "map"), &field::<Vec<f64>>(i, "mu"))),
        "grid_roundtrip" => {
            let (label, offset, decoded) = oracles::oracle_grid_roundtrip(field(i, "u"), field(i, "scale"));
            json!({"label": label, "offset": offset, "decoded": decoded})
        }
        "transport" => json!(oracles::oracle_transport(
            &field::<Vec<Vec<f64>>>(i, "mu"),
            &field::<Vec<bool>>(i, "visible"),
            &field::<Vec<Vec<Vec<f64>>>>(i, "queries"),
        )),
        "style" => json!(oracles::oracle_style(
            &field::<Vec<Vec<f64>>>(i, "s"),
            &field::<Vec<Vec<f64>>>(i, "s1"),
            &field::<Vec<Vec<f64>>>(i, "s2"),
            &field::<Vec<bool>>(i, "visible"),
        )),
        other => panic!("unknown oracle op `{other}`"),
    };
    flatten(&v)
}

pub fn expected(case: &OracleCase) -> Vec<f64> {
    flatten(&case.expected)
}

/// Largest absolute library-vs-oracle difference per op, plus case counts.
pub fn max_errors(cases: &[OracleCase]) -> Vec<(String, usize, f64)> {
    OPS.iter()
        .map(|op| {
            let mine: Vec<&OracleCase> = cases.iter().filter(|c| c.op_name == *op).collect();
            let worst = mine
                .iter()
                .map(|c| {
                    let (a, b) = (run_main(c), expected(c));
                    assert_eq!(a.len(), b.len(), "{op}: output length");
                    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
                })
                .fold(0.0, f64::max);
            (op.to_string(), mine.len(), worst)
        })
        .collect()
}
