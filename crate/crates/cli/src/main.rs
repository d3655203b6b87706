fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DRIFTMASK_LOG", "info")).init();
    std::process::exit(driftmask_cli::run(std::env::args_os()));
}
