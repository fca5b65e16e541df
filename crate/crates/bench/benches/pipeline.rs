use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use fishbev::camera::CameraRig;
use fishbev::heads::DecodeConfig;
use fishbev::network::ModelConfig;
use fishbev::pipeline::{Frame, Session};
use fishbev::polygon::{giou, ConvexQuad};
use fishbev::synth::{derive_labels, generate_scene, render_rig, sample_rng, Palette, SceneSpec};
use fishbev::tensor::{Graph, Tensor};

fn frame(cfg: &ModelConfig, rig: &CameraRig) -> Frame {
    let world = generate_scene(&SceneSpec::default(), &mut sample_rng(7, 0)).unwrap();
    let labels = derive_labels(&world, rig, &cfg.bev);
    let images = render_rig(&world.in_vehicle_frame(), rig, &Palette::default());
    Frame { id: 0, images, labels }
}

fn forward(c: &mut Criterion) {
    let rig = CameraRig::synthetic_default();
    let cfg = ModelConfig::desk();
    let f = frame(&cfg, &rig);
    let session = Session::<f32>::new(&cfg, rig, 0).unwrap();
    let decode = DecodeConfig::default();
    c.bench_function("forward_decode_desk_f32", |b| b.iter(|| session.predict(black_box(&f), &decode).unwrap()));
}

fn render(c: &mut Criterion) {
    let rig = CameraRig::synthetic_default();
    let world = generate_scene(&SceneSpec::default(), &mut sample_rng(7, 0)).unwrap();
    let w = world.in_vehicle_frame();
    let palette = Palette {
        supersample: 1,
        ..Palette::default()
    };
    c.bench_function("render_rig_1spp", |b| b.iter(|| render_rig(black_box(&w), &rig, &palette)));
}

fn conv(c: &mut Criterion) {
    let x = Tensor::<f32>::new(vec![100, 100, 8], vec![0.25; 80_000]).unwrap();
    let w = Tensor::<f32>::new(vec![3, 3, 8, 16], vec![0.01; 1152]).unwrap();
    c.bench_function("conv3x3_100x100_8to16", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
            black_box(g.conv2d(xv, wv, 1, 1).unwrap());
        })
    });
}

fn polygon(c: &mut Criterion) {
    let a = ConvexQuad::new([[2.0, 1.0], [2.0, -1.0], [-2.0, -1.0], [-2.0, 1.0]]);
    let b = ConvexQuad::new([[2.5, 1.3], [2.4, -0.8], [-1.6, -1.1], [-1.5, 1.2]]);
    c.bench_function("giou_quad", |bn| bn.iter(|| giou(black_box(&a), black_box(&b))));
}

criterion_group!(benches, forward, render, conv, polygon);
criterion_main!(benches);
