use criterion::{criterion_group, criterion_main, Criterion};
use resadapt::trainer::{freezing_mask, Protocol};
use resadapt::{Mode, Tape};
use resadapt_bench::{batch, desk_net};

fn train_step(c: &mut Criterion) {
    let net = desk_net();
    let x = batch(32, 32);
    let labels: Vec<usize> = (0..32).map(|i| i % 10).collect();
    let mut group = c.benchmark_group("desk_step_32");
    group.sample_size(10);
    for protocol in [Protocol::Finetune, Protocol::ResAdapt, Protocol::FeatureExtract] {
        let mask = freezing_mask(&net, protocol, &[0]).unwrap();
        group.bench_function(protocol.as_str(), |b| {
            b.iter(|| {
                let mut net = net.clone();
                let mut tape = Tape::new();
                let xv = tape.leaf(x.clone(), false);
                let pass = net.forward(&mut tape, xv, 0, Mode::Train, Some(&mask)).unwrap();
                let loss = tape.softmax_cross_entropy(pass.logits, &labels).unwrap();
                tape.backward(loss).unwrap();
            })
        });
    }
    group.bench_function("predict", |b| b.iter(|| net.predict(&x, 0).unwrap()));
    group.finish();
}

criterion_group!(benches, train_step);
criterion_main!(benches);
