use grain::experiments::dataset::*;
use grain::model::*;

fn main() {
    let params = GenParams::standard();
    let t0 = std::time::Instant::now();
    let records = gen_dataset(&params, 2024).unwrap();
    println!("gen_dataset: {} records in {:?}", records.len(), t0.elapsed());

    let arch = VitConfig::standard(params.extent());
    let cfg = TrainConfig { epochs: 60, seed: 7, ..TrainConfig::default() };
    let t1 = std::time::Instant::now();
    let (model, report) = train(&records, arch, &cfg).unwrap();
    println!("train: {:?}; best val MAE {:.3} cm at epoch {}", t1.elapsed(), report.best_val_mae_cm, report.best_epoch);
    for s in report.log.iter().step_by(5) {
        println!("epoch {:3}: train_loss {:.5}  val_mae {:.3} cm", s.epoch, s.train_loss, s.val_mae_cm);
    }
    let mut buf = Vec::new();
    write_model(&model, &mut buf).unwrap();
    std::fs::write("/tmp/dev_model.bin", &buf).unwrap();
    println!("model written to /tmp/dev_model.bin ({} bytes)", buf.len());
}
