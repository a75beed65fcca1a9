fn main() {
    std::process::exit(asym_ao_cli::run(std::env::args_os()));
}
