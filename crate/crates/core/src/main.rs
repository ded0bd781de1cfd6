fn main() {
    std::process::exit(incstab::cli::run(std::env::args_os()));
}
