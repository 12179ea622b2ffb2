fn main() {
    let fc = pgt::config::load_config(std::path::Path::new("configs/micro.cfg")).unwrap();
    let state = pgt::ssl::trainer::init_state::<f32>(&fc, 7).unwrap();
    pgt::ssl::trainer::save_state(&state, std::path::Path::new("/tmp/init.pgt")).unwrap();
    println!("saved");
}
