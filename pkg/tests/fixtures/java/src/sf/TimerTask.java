package sf;

public class TimerTask implements java.io.Serializable {
    public boolean repeat = true;
    public Runnable task;
}
