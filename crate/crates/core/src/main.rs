fn main() {
    std::process::exit(pcrl_core::cli::run(std::env::args_os()));
}
