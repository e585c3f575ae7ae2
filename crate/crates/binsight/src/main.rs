fn main() {
    std::process::exit(binsight::run_cli());
}
