fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TFBEST_LOG", "info")).init();
    std::process::exit(tfbest::cli::run(std::env::args_os()));
}
