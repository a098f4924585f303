use std::time::Instant;
use augsearch::autodiff::Tensor;
use augsearch::model::{ChambonNet, ChambonNetConfig};
use augsearch::rng::RandomStream;

fn main() {
    let net = ChambonNet::new(ChambonNetConfig::new(2, 1024, 2)).unwrap();
    let mut rng = RandomStream::new(1, 0);
    let params = net.init(&mut rng);
    let x = Tensor::from_parts(vec![16, 2, 1024], rng.normals(16 * 2 * 1024));
    let labels: Vec<usize> = (0..16).map(|i| i % 2).collect();
    let start = Instant::now();
    for _ in 0..50 {
        let mut d = rng.derive(3);
        net.loss_and_grad(&params, &x, &labels, Some(&mut d)).unwrap();
    }
    println!("{:.2} ms per step", start.elapsed().as_secs_f64() * 1000.0 / 50.0);
}
