#![allow(dead_code)]

use mpic_serving::request::{Mode, Request, SegmentSource};
use mpic_serving::{workload, ServeConfig};

pub fn small_config() -> ServeConfig {
    let mut c = ServeConfig::default();
    c.model.n_layers = 2;
    c.model.n_heads = 2;
    c.model.head_dim = 16;
    c.model.image_token_count = 24;
    c.model.seed = 11;
    c
}

pub fn image(i: usize) -> Vec<u8> {
    workload::image_bytes(99, i)
}

pub fn request(user: &str, mode: Mode, segments: Vec<SegmentSource>, max_tokens: usize) -> Request {
    Request {
        request_id: "t".into(),
        user: user.into(),
        mode,
        segments,
        max_tokens,
    }
}

/// text, image, text, image, text
pub fn mixed(ids: &[String]) -> Vec<SegmentSource> {
    vec![
        SegmentSource::text("Compare "),
        SegmentSource::cached(ids[0].clone()),
        SegmentSource::text(" with "),
        SegmentSource::cached(ids[1].clone()),
        SegmentSource::text(" please."),
    ]
}
