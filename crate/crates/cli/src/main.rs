fn main() {
    std::process::exit(gdc::run(std::env::args_os()));
}
