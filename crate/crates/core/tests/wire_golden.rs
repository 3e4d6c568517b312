//! Wire frames against golden vectors written by an independent Python
//! encoder (`tests/data/gen_wire_golden.py`).

use rvfuzz::generators::external::{WireRequest, WireResponse};
use serde::Deserialize;

#[derive(Deserialize)]
struct Golden {
    requests: Vec<RequestCase>,
    responses: Vec<ResponseCase>,
}

#[derive(Deserialize)]
struct RequestCase {
    name: String,
    batch: u32,
    seed: String,
    coverage: Vec<f32>,
    hex: String,
}

#[derive(Deserialize)]
struct ResponseCase {
    name: String,
    tokens: Vec<u8>,
    hex: String,
}

fn golden() -> Golden {
    serde_json::from_str(include_str!("data/wire_golden.json")).unwrap()
}

#[test]
fn requests_match_golden_bytes() {
    for c in golden().requests {
        let req = WireRequest {
            batch: c.batch,
            seed: c.seed.parse().unwrap(),
            coverage: c.coverage.try_into().unwrap(),
        };
        let bytes = hex::decode(&c.hex).unwrap();
        assert_eq!(req.encode(), bytes, "{}", c.name);
        assert_eq!(WireRequest::read_from(&mut &bytes[..]).unwrap(), req, "{}", c.name);
    }
}

#[test]
fn responses_match_golden_bytes() {
    for c in golden().responses {
        let resp = WireResponse { tokens: c.tokens };
        let bytes = hex::decode(&c.hex).unwrap();
        assert_eq!(resp.encode(), bytes, "{}", c.name);
        assert_eq!(WireResponse::read_from(&mut &bytes[..]).unwrap(), resp, "{}", c.name);
    }
}
